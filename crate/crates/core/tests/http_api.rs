mod common;

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};
use tidepool::service::http::{serve_on, QUEUE_DEPTH_HEADER};
use tidepool::service::{Clients, Service};

struct Api {
    base: String,
    http: Client,
    token: Option<String>,
}

impl Api {
    fn start(store: &Path, token: Option<&str>) -> Self {
        let mut config = common::mock_config();
        config.service.token = token.map(str::to_string);
        let clients = Clients::from_config(&config).unwrap();
        let svc = Arc::new(Service::open(store, config, clients).unwrap());
        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            tokio::runtime::Runtime::new().unwrap().block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                tx.send(listener.local_addr().unwrap()).unwrap();
                serve_on(svc, listener).await.unwrap();
            })
        });
        let base = format!("http://{}", rx.recv().unwrap());
        Self { base, http: Client::new(), token: token.map(str::to_string) }
    }

    fn req(&self, method: reqwest::Method, path: &str) -> reqwest::blocking::RequestBuilder {
        let r = self.http.request(method, format!("{}{path}", self.base));
        match &self.token {
            Some(t) => r.bearer_auth(t),
            None => r,
        }
    }

    fn get(&self, path: &str) -> reqwest::blocking::Response {
        self.req(reqwest::Method::GET, path).send().unwrap()
    }

    fn post(&self, path: &str, body: Value) -> reqwest::blocking::Response {
        self.req(reqwest::Method::POST, path).json(&body).send().unwrap()
    }

    fn wait(&self, job_id: &str) -> Value {
        let deadline = Instant::now() + Duration::from_secs(30);
        loop {
            let job: Value = self.get(&format!("/jobs/{job_id}")).json().unwrap();
            if job["state"] == "done" || job["state"] == "failed" {
                return job;
            }
            assert!(Instant::now() < deadline, "job {job_id} did not finish");
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    fn run(&self, kind: &str, params: Value) -> Value {
        let resp = self.post("/jobs", json!({"kind": kind, "params": params}));
        assert!(resp.status().is_success(), "{}", resp.text().unwrap());
        let job: Value = resp.json().unwrap();
        self.wait(job["job_id"].as_str().unwrap())
    }
}

#[test]
fn jobs_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let dump = common::small_dump(dir.path(), 3, "");
    let api = Api::start(&dir.path().join("store"), None);

    let resp = api.post("/jobs", json!({"kind": "ingest", "params": {"dumps": [{"path": dump}]}}));
    assert_eq!(resp.status(), StatusCode::ACCEPTED);
    let job: Value = resp.json().unwrap();
    assert_eq!(job["kind"], "ingest");
    let done = api.wait(job["job_id"].as_str().unwrap());
    assert_eq!(done["state"], "done");
    assert_eq!(done["progress"], json!({"done": 3, "total": 3}));

    let again = api.post("/jobs", json!({"kind": "ingest", "params": {"dumps": [{"path": dump}]}}));
    assert_eq!(again.status(), StatusCode::OK);
    assert_eq!(again.json::<Value>().unwrap()["job_id"], job["job_id"]);

    let bad = api.post("/jobs", json!({"kind": "transmogrify", "params": {}}));
    assert_eq!(bad.status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(bad.json::<Value>().unwrap()["error"], "InvalidParams");
    let bad = api.post("/jobs", json!({"kind": "assemble", "params": {"stage": "nope"}}));
    assert_eq!(bad.status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(api.get("/jobs/job-424242").status(), StatusCode::NOT_FOUND);
}

#[test]
fn review_round_trip_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tidepool::mock::write_demo_corpus(&dir.path().join("corpus")).unwrap();
    let api = Api::start(&dir.path().join("store"), None);

    let empty = api.get("/review/next?reviewer=ann");
    assert_eq!(empty.status(), StatusCode::NO_CONTENT);
    assert_eq!(empty.headers()[QUEUE_DEPTH_HEADER], "0");

    let ingest = json!({
        "videos": [{"path": corpus.subtitled_video, "subtitles": corpus.subtitles, "category": "Amphiprion ocellaris"}],
        "taxa": corpus.taxa,
        "facts": corpus.facts,
    });
    assert_eq!(api.run("ingest", ingest)["state"], "done");
    assert_eq!(api.run("expand", json!({}))["state"], "done");

    let resp = api.get("/review/next?reviewer=ann");
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()[QUEUE_DEPTH_HEADER], "6");
    let item: Value = resp.json().unwrap();
    assert_eq!(item["reason"], "subtitle_aligned");
    assert_eq!(item["state"], "pending");
    assert_eq!(item["provenance"], json!(["ingested", "subtitle_aligned"]));
    let image = api.get(item["image_url"].as_str().unwrap());
    assert_eq!(image.status(), StatusCode::OK);
    assert_eq!(image.headers()["content-type"], "image/png");
    assert_eq!(api.get("/images/..%2Fsnapshot.json").status(), StatusCode::NOT_FOUND);

    let id = item["item_id"].as_str().unwrap();
    let path = format!("/review/{id}/decision");
    let missing = api.post(&path, json!({"verdict": "edit", "idempotency_key": "k0"}));
    assert_eq!(missing.status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(missing.json::<Value>().unwrap()["error"], "MissingEditedText");

    let body =
        json!({"verdict": "edit", "edited_text": "corrected caption", "reviewer": "ann", "idempotency_key": "k1"});
    let first: Value = api.post(&path, body.clone()).json().unwrap();
    assert_eq!(first["state"], "edited");
    assert_eq!(first["edited_text"], "corrected caption");
    // Network retry with the same key.
    let retry = api.post(&path, body);
    assert_eq!(retry.status(), StatusCode::OK);
    assert_eq!(retry.json::<Value>().unwrap(), first);
    let conflict = api.post(&path, json!({"verdict": "reject", "idempotency_key": "k2"}));
    assert_eq!(conflict.status(), StatusCode::CONFLICT);
    assert_eq!(conflict.json::<Value>().unwrap()["error"], "AlreadyDecided");
    assert_eq!(api.post("/review/rev-999999/decision", json!({"verdict": "accept"})).status(), StatusCode::NOT_FOUND);

    let stats: Value = api.get("/stats").json().unwrap();
    assert_eq!(stats["review"]["edited"], 1);
    assert_eq!(stats["review"]["pending"], 5);

    assert_eq!(api.get("/manifests/pretrain").status(), StatusCode::NOT_FOUND);
    assert_eq!(api.get("/manifests/stage9").status(), StatusCode::NOT_FOUND);
    let job = api.run("assemble", json!({"stage": "pretrain"}));
    assert_eq!(job["state"], "failed");
    assert!(job["error"].as_str().unwrap().starts_with("UnresolvedReviewItems"));
    let job = api.run("assemble", json!({"stage": "pretrain", "exclude_pending": true}));
    assert_eq!(job["state"], "done", "{job}");
    let manifest = api.get("/manifests/pretrain");
    assert_eq!(manifest.status(), StatusCode::OK);
    let text = manifest.text().unwrap();
    assert!(text.contains("# resize_target=224"));
    let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines.len(), 1);
    assert!(lines[0].contains("corrected caption") && lines[0].contains("human_refined"));
}

#[test]
fn shared_token_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::start(&dir.path().join("store"), Some("letmein"));
    assert_eq!(api.get("/stats").status(), StatusCode::OK);
    let anon = Client::new().get(format!("{}/stats", api.base)).send().unwrap();
    assert_eq!(anon.status(), StatusCode::UNAUTHORIZED);
    let wrong = Client::new().get(format!("{}/stats", api.base)).bearer_auth("nope").send().unwrap();
    assert_eq!(wrong.status(), StatusCode::UNAUTHORIZED);
}
