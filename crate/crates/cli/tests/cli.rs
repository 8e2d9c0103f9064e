use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::thread::sleep;
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_chunkferry");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_clear().output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn version_prints_the_banner() {
    let o = run(&["--version"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim_end(), "CHUNKFERRY/1");
}

#[test]
fn plan_of_one_gib() {
    let o = run(&[
        "plan",
        "--size",
        "1073741824",
        "--concurrency",
        "4",
        "--parallelism",
        "2",
        "--depth",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim_end(), "S=64 MiB, 16 chunks");
}

#[test]
fn plan_small_file_is_one_chunk_and_lists_it() {
    let o = run(&["plan", "--size", "1000", "--list"]);
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines, ["S=1000 B, 1 chunk", "0\t0\t1000"]);
}

#[test]
fn verify_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("f");
    std::fs::File::create(&f).unwrap();
    let o = run(&["verify", "--path", f.to_str().unwrap(), "--algo", "MD5"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim_end(), "d41d8cd98f00b204e9800998ecf8427e");
}

#[test]
fn verify_missing_file_is_io_error() {
    let o = run(&["verify", "--path", "/nonexistent/chunkferry/f"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(
        run(&["plan", "--size", "1", "--bogus"]).status.code(),
        Some(1)
    );
    assert_eq!(
        run(&["plan", "--size", "1", "--concurrency", "0"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        run(&["verify", "--path", "x", "--algo", "SHA999"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn environment_sets_flags_and_flags_win() {
    let o = Command::new(BIN)
        .args([
            "plan",
            "--concurrency",
            "1",
            "--parallelism",
            "1",
            "--depth",
            "1",
        ])
        .env_clear()
        .env("CHUNKFERRY_SIZE", "12582912")
        .env("CHUNKFERRY_S_MIN", "1048576")
        .output()
        .unwrap();
    assert_eq!(stdout(&o).trim_end(), "S=12 MiB, 1 chunk");

    let o = Command::new(BIN)
        .args(["plan", "--size", "1073741824", "--depth", "2"])
        .env_clear()
        .env("CHUNKFERRY_DEPTH", "1")
        .output()
        .unwrap();
    assert_eq!(stdout(&o).trim_end(), "S=64 MiB, 16 chunks");
}

#[test]
fn transfer_to_unreachable_agent_exits_three() {
    let dead = free_port();
    let o = run(&[
        "transfer",
        "--from",
        &format!("127.0.0.1:{dead}/f"),
        "--to",
        &format!("127.0.0.1:{dead}/g"),
        "--token",
        "t",
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn transfer_rejects_bad_locations_before_connecting() {
    let o = run(&[
        "transfer",
        "--from",
        "nowhere",
        "--to",
        "127.0.0.1:1/g",
        "--token",
        "t",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&[
        "transfer",
        "--from",
        "127.0.0.1:1/f",
        "--to",
        "127.0.0.1:1/g",
    ]);
    assert_eq!(o.status.code(), Some(1), "missing token is a usage error");
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn serve(root: &Path) -> (Server, String) {
    let addr = format!("127.0.0.1:{}", free_port());
    let child = Command::new(BIN)
        .args(["serve", "--listen", &addr, "--root", root.to_str().unwrap()])
        .env_clear()
        .env("CHUNKFERRY_TOKEN", "secret")
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    while TcpStream::connect(&addr).is_err() {
        assert!(Instant::now() < deadline, "agent did not come up");
        sleep(Duration::from_millis(20));
    }
    (Server(child), addr)
}

#[test]
fn transfer_resume_and_bench_end_to_end() {
    let src = tempfile::tempdir().unwrap();
    let dst = tempfile::tempdir().unwrap();
    let data: Vec<u8> = (0..3_000_000u32)
        .map(|i| (i.wrapping_mul(2_654_435_761) >> 13) as u8)
        .collect();
    std::fs::write(src.path().join("in.bin"), &data).unwrap();
    let (_s, saddr) = serve(src.path());
    let (_d, daddr) = serve(dst.path());
    let journal = dst.path().join("j.log");

    let o = Command::new(BIN)
        .args([
            "transfer",
            "--from",
            &format!("{saddr}/in.bin"),
            "--to",
            &format!("{daddr}/out.bin"),
            "--chunked",
            "--chunk-size",
            "262144",
            "--concurrency",
            "3",
            "--journal",
            journal.to_str().unwrap(),
            "--report",
            "csv",
        ])
        .env_clear()
        .env("CHUNKFERRY_TOKEN", "secret")
        .output()
        .unwrap();
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(std::fs::read(dst.path().join("out.bin")).unwrap(), data);
    let text = stdout(&o);
    assert_eq!(
        text.lines().next(),
        Some("scenario,config,run,throughput_bps,transfer_s,integrity_s,retries")
    );

    // Everything is verified, so a resume moves nothing.
    let o = Command::new(BIN)
        .args([
            "resume",
            "--journal",
            journal.to_str().unwrap(),
            "--report",
            "json-lines",
        ])
        .env_clear()
        .env("CHUNKFERRY_TOKEN", "secret")
        .output()
        .unwrap();
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).contains("\"payload_bytes\":0"), "{}", stdout(&o));

    let o = Command::new(BIN)
        .args([
            "transfer",
            "--from",
            &format!("{saddr}/missing"),
            "--to",
            &format!("{daddr}/x"),
            "--token",
            "secret",
        ])
        .env_clear()
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(4));

    let work = tempfile::tempdir().unwrap();
    let scenario = work.path().join("s.toml");
    let mut f = std::fs::File::create(&scenario).unwrap();
    writeln!(
        f,
        "name = \"cli\"\nrepetitions = 2\n[[layouts]]\nfiles = 2\ntotal_bytes = 400000\n[template]\nchunk_size = 65536"
    )
    .unwrap();
    let csv = work.path().join("r.csv");
    let o = run(&[
        "bench",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
        "--workdir",
        work.path().to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 + 2);
    assert!(rows.lines().any(|l| l.starts_with("cli,default,std,")));
}
