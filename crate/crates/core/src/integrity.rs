//! Checksums: streaming digests, per-chunk manifests and composite file digests.
//!
//! MD5 is the default and the only algorithm every endpoint must support.
//! SHA256 is registered as a second member so the registry stays honest about
//! being pluggable.

use std::fmt;
use std::fs::File;
use std::io::{self, Read};
use std::path::Path;
use std::str::FromStr;

use md5::Md5;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub const DEFAULT_ALGO: Algorithm = Algorithm::Md5;

#[derive(Debug, Error)]
pub enum IntegrityError {
    #[error("unknown checksum algorithm {0:?}")]
    UnknownAlgorithm(String),
    #[error("digest algorithms differ: {0} vs {1}")]
    AlgorithmMismatch(Algorithm, Algorithm),
    #[error("digest value has {got} bytes, {algo} produces {want}")]
    BadLength {
        algo: Algorithm,
        got: usize,
        want: usize,
    },
    #[error("bad hex digest: {0}")]
    BadHex(#[from] hex::FromHexError),
    #[error("manifest row {0} is not verified")]
    Unverified(u64),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Md5,
    Sha256,
}

impl Algorithm {
    pub const ALL: [Algorithm; 2] = [Algorithm::Md5, Algorithm::Sha256];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Md5 => "MD5",
            Algorithm::Sha256 => "SHA256",
        }
    }

    pub fn output_len(self) -> usize {
        match self {
            Algorithm::Md5 => 16,
            Algorithm::Sha256 => 32,
        }
    }

    pub fn hasher(self) -> Hasher {
        match self {
            Algorithm::Md5 => Hasher::Md5(Md5::new()),
            Algorithm::Sha256 => Hasher::Sha256(Sha256::new()),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = IntegrityError;

    /// Names are matched case-insensitively; "MD5SUM" is accepted as an alias.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "MD5" | "MD5SUM" => Ok(Algorithm::Md5),
            "SHA256" | "SHA-256" => Ok(Algorithm::Sha256),
            _ => Err(IntegrityError::UnknownAlgorithm(s.to_string())),
        }
    }
}

impl serde::Serialize for Algorithm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> serde::Deserialize<'de> for Algorithm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// An in-progress digest computation. Single writer.
#[derive(Clone)]
pub enum Hasher {
    Md5(Md5),
    Sha256(Sha256),
}

impl Hasher {
    pub fn update(&mut self, data: &[u8]) {
        match self {
            Hasher::Md5(h) => h.update(data),
            Hasher::Sha256(h) => h.update(data),
        }
    }

    pub fn algorithm(&self) -> Algorithm {
        match self {
            Hasher::Md5(_) => Algorithm::Md5,
            Hasher::Sha256(_) => Algorithm::Sha256,
        }
    }

    pub fn finish(self) -> Digest {
        let algo = self.algorithm();
        let value = match self {
            Hasher::Md5(h) => h.finalize().to_vec(),
            Hasher::Sha256(h) => h.finalize().to_vec(),
        };
        Digest { algo, value }
    }
}

impl fmt::Debug for Hasher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Hasher({})", self.algorithm())
    }
}

/// A finished digest. Rendered as lowercase hex.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Digest {
    algo: Algorithm,
    value: Vec<u8>,
}

impl Digest {
    pub fn new(algo: Algorithm, value: Vec<u8>) -> Result<Self, IntegrityError> {
        if value.len() != algo.output_len() {
            return Err(IntegrityError::BadLength {
                algo,
                got: value.len(),
                want: algo.output_len(),
            });
        }
        Ok(Digest { algo, value })
    }

    pub fn from_hex(algo: Algorithm, text: &str) -> Result<Self, IntegrityError> {
        Digest::new(algo, hex::decode(text)?)
    }

    pub fn of(algo: Algorithm, data: &[u8]) -> Digest {
        let mut h = algo.hasher();
        h.update(data);
        h.finish()
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algo
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.value
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.value)
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.algo, self.to_hex())
    }
}

/// Digest of everything `reader` yields until EOF.
pub fn streaming_digest<R: Read>(mut reader: R, algo: Algorithm) -> io::Result<Digest> {
    let mut h = algo.hasher();
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        let n = match reader.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        };
        h.update(&buf[..n]);
    }
    Ok(h.finish())
}

/// Digest of a file's full contents, read back from storage.
pub fn whole_file_digest(path: &Path, algo: Algorithm) -> Result<Digest, IntegrityError> {
    let f = File::open(path)?;
    Ok(streaming_digest(f, algo)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    Mismatch,
}

/// Compares a source digest with a destination digest.
pub fn verify_pair(source: &Digest, destination: &Digest) -> Result<Verdict, IntegrityError> {
    if source.algo != destination.algo {
        return Err(IntegrityError::AlgorithmMismatch(
            source.algo,
            destination.algo,
        ));
    }
    Ok(if source.value == destination.value {
        Verdict::Ok
    } else {
        Verdict::Mismatch
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub chunk_index: u64,
    pub offset: u64,
    pub length: u64,
    pub source_digest: Option<Digest>,
    pub destination_digest: Option<Digest>,
    pub verified: bool,
}

/// Per-chunk digests for one file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChecksumManifest {
    pub file_id: u64,
    pub algo: Algorithm,
    rows: Vec<ManifestRow>,
}

impl ChecksumManifest {
    pub fn new(file_id: u64, algo: Algorithm) -> Self {
        ChecksumManifest {
            file_id,
            algo,
            rows: Vec::new(),
        }
    }

    /// Inserts or replaces the row for `row.chunk_index`, keeping rows sorted.
    /// A row can only be marked verified when both digests are present and equal.
    pub fn upsert(&mut self, mut row: ManifestRow) {
        row.verified = row.verified
            && matches!((&row.source_digest, &row.destination_digest), (Some(s), Some(d)) if s == d);
        match self
            .rows
            .binary_search_by_key(&row.chunk_index, |r| r.chunk_index)
        {
            Ok(i) => self.rows[i] = row,
            Err(i) => self.rows.insert(i, row),
        }
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn all_verified(&self) -> bool {
        self.rows.iter().all(|r| r.verified)
    }

    /// Digest over the raw destination digests of every chunk, in chunk order.
    pub fn composite_digest(&self) -> Result<Digest, IntegrityError> {
        let mut h = self.algo.hasher();
        for row in &self.rows {
            match (&row.destination_digest, row.verified) {
                (Some(d), true) => h.update(d.as_bytes()),
                _ => return Err(IntegrityError::Unverified(row.chunk_index)),
            }
        }
        Ok(h.finish())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    const MD5_EMPTY: &str = "d41d8cd98f00b204e9800998ecf8427e";

    #[test]
    fn md5_reference_vectors() {
        // RFC 1321 appendix A.5
        let vectors = [
            ("", MD5_EMPTY),
            ("a", "0cc175b9c0f1b6a831c399e269772661"),
            ("abc", "900150983cd24fb0d6963f7d28e17f72"),
            ("message digest", "f96b697d7cb7938d525a2f31aaf161d0"),
            (
                "12345678901234567890123456789012345678901234567890123456789012345678901234567890",
                "57edf4a22be3c955ac49da2e2107b67a",
            ),
        ];
        for (input, want) in vectors {
            let d = streaming_digest(input.as_bytes(), Algorithm::Md5).unwrap();
            assert_eq!(d.to_hex(), want, "input {input:?}");
        }
    }

    #[test]
    fn one_byte_pieces_match_one_shot() {
        let data: Vec<u8> = (0..10_000u32).map(|i| (i * 31 % 251) as u8).collect();
        let mut h = Algorithm::Md5.hasher();
        for b in &data {
            h.update(std::slice::from_ref(b));
        }
        assert_eq!(h.finish(), Digest::of(Algorithm::Md5, &data));
    }

    #[test]
    fn algorithm_names() {
        assert_eq!("md5".parse::<Algorithm>().unwrap(), Algorithm::Md5);
        assert_eq!("MD5SUM".parse::<Algorithm>().unwrap(), Algorithm::Md5);
        assert!(matches!(
            "SHA999".parse::<Algorithm>(),
            Err(IntegrityError::UnknownAlgorithm(_))
        ));
    }

    #[test]
    fn digest_length_is_checked() {
        assert!(Digest::new(Algorithm::Md5, vec![0; 15]).is_err());
        assert!(Digest::from_hex(Algorithm::Md5, MD5_EMPTY).is_ok());
        assert!(Digest::from_hex(Algorithm::Sha256, MD5_EMPTY).is_err());
    }

    #[test]
    fn verify_pair_outcomes() {
        let a = Digest::of(Algorithm::Md5, b"chunk");
        assert_eq!(verify_pair(&a, &a.clone()).unwrap(), Verdict::Ok);

        let mut flipped = b"chunk".to_vec();
        flipped[2] ^= 0x01;
        let b = Digest::of(Algorithm::Md5, &flipped);
        assert_eq!(verify_pair(&a, &b).unwrap(), Verdict::Mismatch);

        let c = Digest::of(Algorithm::Sha256, b"chunk");
        assert!(matches!(
            verify_pair(&a, &c),
            Err(IntegrityError::AlgorithmMismatch(..))
        ));
    }

    #[test]
    fn whole_file_digest_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f");
        std::fs::File::create(&p).unwrap();
        assert_eq!(
            whole_file_digest(&p, Algorithm::Md5).unwrap().to_hex(),
            MD5_EMPTY
        );

        let data = b"some bytes to be stored".to_vec();
        std::fs::File::create(&p).unwrap().write_all(&data).unwrap();
        let first = whole_file_digest(&p, Algorithm::Md5).unwrap();
        assert_eq!(first, Digest::of(Algorithm::Md5, &data));

        let mut flipped = data.clone();
        flipped[5] ^= 0x80;
        std::fs::write(&p, &flipped).unwrap();
        assert_ne!(whole_file_digest(&p, Algorithm::Md5).unwrap(), first);
    }

    fn row(i: u64, d: &Digest) -> ManifestRow {
        ManifestRow {
            chunk_index: i,
            offset: i * 10,
            length: 10,
            source_digest: Some(d.clone()),
            destination_digest: Some(d.clone()),
            verified: true,
        }
    }

    #[test]
    fn composite_single_row_is_digest_of_raw_bytes() {
        let d = Digest::of(Algorithm::Md5, b"x");
        let mut m = ChecksumManifest::new(0, Algorithm::Md5);
        m.upsert(row(0, &d));
        assert_eq!(
            m.composite_digest().unwrap(),
            Digest::of(Algorithm::Md5, d.as_bytes())
        );
    }

    #[test]
    fn composite_is_order_sensitive() {
        let d0 = Digest::of(Algorithm::Md5, b"first");
        let d1 = Digest::of(Algorithm::Md5, b"second");
        let mut m = ChecksumManifest::new(0, Algorithm::Md5);
        m.upsert(row(1, &d1));
        m.upsert(row(0, &d0));
        assert_eq!(m.rows()[0].chunk_index, 0);

        let mut swapped = ChecksumManifest::new(0, Algorithm::Md5);
        swapped.upsert(row(0, &d1));
        swapped.upsert(row(1, &d0));
        assert_ne!(
            m.composite_digest().unwrap(),
            swapped.composite_digest().unwrap()
        );
    }

    #[test]
    fn composite_requires_verified_rows() {
        let d = Digest::of(Algorithm::Md5, b"x");
        let mut m = ChecksumManifest::new(0, Algorithm::Md5);
        let mut r = row(0, &d);
        r.destination_digest = Some(Digest::of(Algorithm::Md5, b"y"));
        m.upsert(r);
        assert!(!m.all_verified());
        assert!(matches!(
            m.composite_digest(),
            Err(IntegrityError::Unverified(0))
        ));
    }
}
