#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::Value;
use sourcecap::llm::ScriptedLlm;
use sourcecap::service::{serve, AppState, ServiceConfig};

pub fn toy_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy")
}

/// A service on an ephemeral port, driven by its own runtime thread.
pub struct TestServer {
    pub base: String,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl TestServer {
    pub fn start(config: ServiceConfig, llm: ScriptedLlm) -> Self {
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
            rt.block_on(async move {
                let state = Arc::new(AppState::open(&config, Arc::new(llm)).unwrap());
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                serve(listener, state, async {
                    let _ = rx.await;
                })
                .await
                .unwrap();
            });
        });
        let addr = addr_rx.recv_timeout(Duration::from_secs(30)).expect("server did not start");
        Self {
            base: format!("http://{addr}"),
            shutdown: Some(tx),
            thread: Some(thread),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    /// Polls `GET /runs/{id}` until the job is done or failed.
    pub fn wait(&self, client: &reqwest::blocking::Client, id: &str, limit: Duration) -> Value {
        let started = Instant::now();
        loop {
            let body: Value = client.get(self.url(&format!("/runs/{id}"))).send().unwrap().json().unwrap();
            let state = body["state"].as_str().unwrap().to_string();
            if state == "done" || state == "failed" {
                return body;
            }
            assert!(started.elapsed() < limit, "run {id} still {state}");
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn service_config(data_dir: &Path, manifest: Option<PathBuf>) -> ServiceConfig {
    ServiceConfig {
        data_dir: data_dir.to_path_buf(),
        manifest,
        run_concurrency: 1,
        query_concurrency: 1,
        ui_dir: None,
    }
}

pub fn toy_stub() -> ScriptedLlm {
    ScriptedLlm::from_file(&toy_dir().join("stub.json")).unwrap()
}
