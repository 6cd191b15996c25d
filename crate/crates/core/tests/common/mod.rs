#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::routing::get;
use axum::Router;
use tidepool::config::{ClientMode, Config, ExtractorChoice};
use tidepool::service::{Clients, Service};

/// Serves files under `dir` on an ephemeral port; returns the base URL.
pub fn serve_dir(dir: &Path) -> String {
    async fn file(State(root): State<Arc<PathBuf>>, UrlPath(rel): UrlPath<String>) -> Result<Vec<u8>, StatusCode> {
        if rel.contains("..") {
            return Err(StatusCode::NOT_FOUND);
        }
        tokio::fs::read(root.join(rel)).await.map_err(|_| StatusCode::NOT_FOUND)
    }
    let app = Router::new().route("/*rel", get(file)).with_state(Arc::new(dir.to_path_buf()));
    spawn_server(app)
}

pub fn spawn_server(app: Router) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

pub fn mock_config() -> Config {
    let mut c = Config::default();
    c.clients.mode = ClientMode::Mock;
    c.frames.extractor = ExtractorChoice::Mock;
    c.politeness.min_spacing_ms = 5;
    c.politeness.backoff_base_ms = 5;
    c
}

pub fn open_mock(store: &Path) -> Service {
    let config = mock_config();
    let clients = Clients::from_config(&config).unwrap();
    Service::open(store, config, clients).unwrap()
}

/// Writes `n` distinct PNGs and a dump manifest listing them.
pub fn small_dump(dir: &Path, n: usize, category: &str) -> PathBuf {
    let mut lines = String::new();
    for i in 0..n {
        let name = format!("s{i}.png");
        tidepool::mock::synthetic_image(&format!("small-{i}"), 80, 80).save(dir.join(&name)).unwrap();
        lines.push_str(&format!("{name}\t{category}\tpuffer resting on the sand number {i}\n"));
    }
    let path = dir.join("small.tsv");
    std::fs::write(&path, lines).unwrap();
    path
}
