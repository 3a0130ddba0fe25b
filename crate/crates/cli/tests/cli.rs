use std::io::Read;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

const STACK: &str = env!("CARGO_BIN_EXE_stack");
const SCENARIO: &str = env!("CARGO_BIN_EXE_scenario");

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn run(bin: &str, args: &[&str]) -> Output {
    Command::new(bin).args(args).output().expect("spawn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn validate_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(tmp.path(), "bad.toml", "components = [\"analytics\"]\n");
    let out = run(STACK, &["validate", "--config", &bad]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert!(text.contains("collection layer"), "{text}");
    assert!(text.contains("visualization layer"), "{text}");
    assert!(text.contains("invalid:"), "{text}");

    let full = repo_file("deploy/stack.toml");
    let out = run(STACK, &["validate", "--config", full.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).starts_with("ok:") || stdout(&out).contains("\nok:"));
}

#[test]
fn unreadable_or_malformed_config_is_invalid() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    let out = run(STACK, &["validate", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let garbled = write(tmp.path(), "garbled.toml", "components = [\n");
    let out = run(STACK, &["plan", "--config", &garbled]);
    assert_eq!(out.status.code(), Some(1));
    let unknown = write(tmp.path(), "unknown.toml", "components = [\"api\", \"kafka\"]\n");
    assert_eq!(run(STACK, &["validate", "--config", &unknown]).status.code(), Some(1));
}

#[test]
fn plan_is_stable_and_redacted() {
    let tmp = tempfile::tempdir().unwrap();
    let env = write(tmp.path(), ".env", "API_ADMIN_TOKEN=very-secret-1\nCOLLECTOR_PUSH_TOKEN=very-secret-2\n");
    let full = repo_file("deploy/stack.toml");
    let args = ["plan", "--config", full.to_str().unwrap(), "--env-file", &env];
    let a = run(STACK, &args);
    let b = run(STACK, &args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    assert!(!text.contains("very-secret"));
    assert!(text.contains("${API_ADMIN_TOKEN}"));

    let target = tmp.path().join("deployment.toml");
    let mut with_o = args.to_vec();
    with_o.extend(["-o", target.to_str().unwrap()]);
    let out = run(STACK, &with_o);
    assert!(out.status.success());
    assert!(stdout(&out).contains("plan written to"));
    assert_eq!(std::fs::read_to_string(&target).unwrap(), text);
}

#[test]
fn plan_refuses_invalid_config() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(tmp.path(), "bad.toml", "components = [\"tsdb\", \"api\"]\n");
    let out = run(STACK, &["plan", "--config", &bad]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("collection layer"));
}

#[test]
fn components_list() {
    let out = run(STACK, &["components", "list"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for c in ["collector", "gateway", "tsdb", "metastore", "analytics", "alerting", "api", "dashboard"] {
        assert!(text.lines().any(|l| l.starts_with(c)), "{c} missing:\n{text}");
    }
}

#[test]
fn scenario_against_nothing_is_unreachable() {
    let port = free_port();
    let out = run(
        SCENARIO,
        &[
            "run",
            "--file",
            repo_file("scenarios/masking.toml").to_str().unwrap(),
            "--api",
            &format!("http://127.0.0.1:{port}"),
            "--token",
            "x",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn scenario_file_must_parse() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(tmp.path(), "bad.toml", "name = 3\n");
    let out = run(SCENARIO, &["run", "--file", &bad, "--api", "http://127.0.0.1:1", "--token", "x"]);
    assert_eq!(out.status.code(), Some(1));
}

struct Stack(Child);

impl Drop for Stack {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn wait_healthy(addr: &str) -> bool {
    let deadline = Instant::now() + Duration::from_secs(20);
    while Instant::now() < deadline {
        if let Ok(mut s) = std::net::TcpStream::connect(addr) {
            use std::io::Write;
            let _ = s.write_all(format!("GET /api/v1/healthz HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").as_bytes());
            let mut resp = String::new();
            let _ = s.read_to_string(&mut resp);
            if resp.starts_with("HTTP/1.1 200") {
                return true;
            }
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    false
}

/// `stack run` brings up the server and collector processes, the masking
/// scenario passes against it, and SIGTERM shuts everything down cleanly.
#[cfg(unix)]
#[test]
fn stack_run_serves_masking_scenario() {
    let tmp = tempfile::tempdir().unwrap();
    let api_addr = format!("127.0.0.1:{}", free_port());
    let collector_addr = format!("127.0.0.1:{}", free_port());
    let ui = tmp.path().join("ui");
    std::fs::create_dir(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<h1>dashboards</h1>").unwrap();
    let config = write(
        tmp.path(),
        "stack.toml",
        &format!(
            r#"
components = ["api", "dashboard", "analytics", "collector", "gateway", "tsdb", "metastore"]
env_file = ".env"

[collector]
listen_addr = "{collector_addr}"

[gateway]
scrape_targets = [{{ url = "http://{collector_addr}/metrics", interval_seconds = 1 }}]

[dashboard]
assets_dir = "{}"
"#,
            ui.display()
        ),
    );
    write(
        tmp.path(),
        ".env",
        &format!("API_ADMIN_TOKEN=e2e-admin\nAPI_LISTEN_ADDR={api_addr}\nAPI_TEST_MODE=1\n"),
    );
    let child = Command::new(STACK)
        .args(["run", "--config", &config])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut stack = Stack(child);
    assert!(wait_healthy(&api_addr), "api never became healthy");

    let out = run(
        SCENARIO,
        &[
            "run",
            "--file",
            repo_file("scenarios/masking.toml").to_str().unwrap(),
            "--api",
            &format!("http://{api_addr}"),
            "--env-file",
            tmp.path().join(".env").to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}\n{}", stdout(&out), String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("3 passed"), "{}", stdout(&out));

    // dashboard assets are served under /ui
    let mut s = std::net::TcpStream::connect(&api_addr).unwrap();
    use std::io::Write;
    s.write_all(format!("GET /ui/index.html HTTP/1.1\r\nHost: {api_addr}\r\nConnection: close\r\n\r\n").as_bytes())
        .unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    assert!(resp.starts_with("HTTP/1.1 200") && resp.contains("dashboards"), "{resp}");

    // SAFETY: signalling a child we spawned and still own.
    unsafe {
        libc::kill(stack.0.id() as libc::pid_t, libc::SIGTERM);
    }
    let deadline = Instant::now() + Duration::from_secs(15);
    let status = loop {
        if let Some(s) = stack.0.try_wait().unwrap() {
            break s;
        }
        assert!(Instant::now() < deadline, "stack did not stop after SIGTERM");
        std::thread::sleep(Duration::from_millis(50));
    };
    assert_eq!(status.code(), Some(0));
}
