#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use ctlmap::classifier::TrainConfig;
use ctlmap_server::ServiceConfig;

pub const NIST: &str = "NIST-800-53-v4";

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn fixture(name: &str) -> Vec<u8> {
    std::fs::read(fixtures_dir().join(name)).unwrap()
}

/// The first `n` lines of a JSONL fixture.
pub fn fixture_head(name: &str, n: usize) -> Vec<u8> {
    let text = String::from_utf8(fixture(name)).unwrap();
    let mut out = String::new();
    for line in text.lines().take(n) {
        out.push_str(line);
        out.push('\n');
    }
    out.into_bytes()
}

/// A classifier small enough to train in well under a second.
pub fn quick_train() -> TrainConfig {
    TrainConfig {
        dim: 8,
        widths: vec![2, 3],
        n_filters: 4,
        epochs: 3,
        learning_rate: 0.01,
        ..TrainConfig::default()
    }
}

pub fn quick_config(data_dir: &Path, y: usize) -> ServiceConfig {
    let mut config = ServiceConfig {
        data_dir: data_dir.to_path_buf(),
        train: quick_train(),
        ..ServiceConfig::default()
    };
    config.feedback.y = y;
    config
}

/// The training profile shipped for the fixture corpus.
pub fn fixture_profile(data_dir: &Path) -> ServiceConfig {
    let text = std::fs::read_to_string(fixtures_dir().join("ctlmap.toml")).unwrap();
    let mut config = ServiceConfig::from_toml(&text).unwrap();
    config.data_dir = data_dir.to_path_buf();
    config
}

pub fn write_config(path: &Path, config: &ServiceConfig) {
    std::fs::write(path, toml::to_string(config).unwrap()).unwrap();
}

/// Minimal blocking HTTP/1.1 client; returns status and body.
pub fn http(addr: SocketAddr, method: &str, path: &str, body: Option<&str>) -> std::io::Result<(u16, String)> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(Some(Duration::from_secs(120)))?;
    let body = body.unwrap_or("");
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nhost: {addr}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    )?;
    let mut raw = String::new();
    stream.read_to_string(&mut raw)?;
    let status = raw
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| std::io::Error::other(format!("bad response: {raw:?}")))?;
    let body = raw.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    Ok((status, body))
}

pub struct Server {
    pub child: Child,
    pub addr: SocketAddr,
}

impl Server {
    /// Starts `ctlmap serve` on an ephemeral port and waits for it to listen.
    pub fn start(config_path: &Path) -> Server {
        let mut child = Command::new(env!("CARGO_BIN_EXE_ctlmap"))
            .arg("--config")
            .arg(config_path)
            .args(["serve", "--listen", "127.0.0.1:0"])
            .env_remove("DATA_DIR")
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let stderr = child.stderr.take().unwrap();
        let mut lines = BufReader::new(stderr).lines();
        let started = Instant::now();
        let addr = loop {
            let line = lines
                .next()
                .unwrap_or_else(|| panic!("server exited before listening"))
                .unwrap();
            if let Some(a) = line.strip_prefix("listening on ") {
                break a.trim().parse().unwrap();
            }
            assert!(started.elapsed() < Duration::from_secs(300), "server did not start");
        };
        std::thread::spawn(move || for _ in lines {});
        Server { child, addr }
    }

    pub fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
