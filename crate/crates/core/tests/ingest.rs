mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::get;
use axum::Router;
use tidepool::ingest::{import_records, FetchError, Fetcher, PolitenessConfig, Source};

fn polite(spacing_ms: u64) -> PolitenessConfig {
    PolitenessConfig { min_spacing_ms: spacing_ms, backoff_base_ms: 10, ..PolitenessConfig::default() }
}

#[derive(Clone, Default)]
struct Hits {
    count: Arc<AtomicUsize>,
    times: Arc<Mutex<Vec<Instant>>>,
}

fn flaky_server(failures: usize) -> (String, Hits) {
    async fn flaky(State((hits, failures)): State<(Hits, usize)>) -> (StatusCode, Vec<u8>) {
        hits.times.lock().unwrap().push(Instant::now());
        if hits.count.fetch_add(1, Ordering::SeqCst) < failures {
            (StatusCode::SERVICE_UNAVAILABLE, Vec::new())
        } else {
            (StatusCode::OK, b"payload-B".to_vec())
        }
    }
    async fn missing() -> StatusCode {
        StatusCode::NOT_FOUND
    }
    let hits = Hits::default();
    let app = Router::new()
        .route("/a", get(flaky))
        .route("/b", get(flaky))
        .route("/gone", get(missing))
        .with_state((hits.clone(), failures));
    (common::spawn_server(app), hits)
}

#[test]
fn fetch_passes_body_through() {
    let (base, _) = flaky_server(0);
    let r = Fetcher::new(polite(0)).unwrap().fetch_resource(&format!("{base}/a")).unwrap();
    assert_eq!(r.body, b"payload-B");
}

#[test]
fn fetch_retries_server_errors() {
    let (base, hits) = flaky_server(2);
    let r = Fetcher::new(polite(0)).unwrap().fetch_resource(&format!("{base}/a")).unwrap();
    assert_eq!(r.body, b"payload-B");
    assert_eq!(hits.count.load(Ordering::SeqCst), 3);
}

#[test]
fn fetch_gives_up_after_configured_attempts() {
    let (base, hits) = flaky_server(5);
    let err = Fetcher::new(polite(0)).unwrap().fetch_resource(&format!("{base}/a")).unwrap_err();
    assert_eq!(err, FetchError::HttpStatus(503));
    assert_eq!(hits.count.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (base, _) = flaky_server(0);
    let err = Fetcher::new(polite(0)).unwrap().fetch_resource(&format!("{base}/gone")).unwrap_err();
    assert_eq!(err, FetchError::HttpStatus(404));
}

#[test]
fn fetch_spaces_requests_per_host() {
    let (base, hits) = flaky_server(0);
    let f = Fetcher::new(polite(100)).unwrap();
    f.fetch_resource(&format!("{base}/a")).unwrap();
    f.fetch_resource(&format!("{base}/b")).unwrap();
    let times = hits.times.lock().unwrap();
    assert!(times[1] - times[0] >= Duration::from_millis(100), "{:?}", times[1] - times[0]);
}

#[test]
fn concurrent_fetches_stay_spaced() {
    let (base, hits) = flaky_server(0);
    let f = Arc::new(Fetcher::new(polite(50)).unwrap());
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let f = f.clone();
            let url = format!("{base}/a");
            std::thread::spawn(move || f.fetch_resource(&url).unwrap())
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let mut times = hits.times.lock().unwrap().clone();
    times.sort();
    for w in times.windows(2) {
        assert!(w[1] - w[0] >= Duration::from_millis(45), "{:?}", w[1] - w[0]);
    }
}

#[test]
fn fetch_refuses_denied_hosts_and_schemes() {
    let config = PolitenessConfig { deny_hosts: vec!["Example.org".into()], ..polite(0) };
    let f = Fetcher::new(config).unwrap();
    assert_eq!(
        f.fetch_resource("https://example.org/x.png").unwrap_err(),
        FetchError::HostDisallowed("example.org".into())
    );
    assert!(matches!(f.fetch_resource("ftp://example.com/x").unwrap_err(), FetchError::UnsupportedScheme(_)));
    assert!(matches!(f.fetch_resource("not a url").unwrap_err(), FetchError::InvalidUri(_)));
}

#[test]
fn fetch_times_out() {
    async fn slow() -> &'static str {
        tokio::time::sleep(Duration::from_millis(500)).await;
        "late"
    }
    let base = common::spawn_server(Router::new().route("/slow", get(slow)));
    let config = PolitenessConfig { timeout_ms: 50, max_attempts: 1, ..polite(0) };
    let err = Fetcher::new(config).unwrap().fetch_resource(&format!("{base}/slow")).unwrap_err();
    assert!(matches!(err, FetchError::FetchTimeout(_)), "{err:?}");
}

#[test]
fn dump_records_and_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::small_dump(dir.path(), 3, "Zebrasoma flavescens");
    let import = import_records(&manifest, Source::DatasetDump).unwrap();
    assert_eq!(import.items.len(), 3);
    let mut ids: Vec<_> = import.items.iter().map(|m| m.record.record_id.clone()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 3);
    assert_eq!(import.items[0].record.category_annotation.as_deref(), Some("zebrasoma flavescens"));

    std::fs::write(&manifest, "s0.png\ns0.png\n").unwrap();
    let twice = import_records(&manifest, Source::DatasetDump).unwrap();
    assert_eq!(twice.items.len(), 2);
    assert_eq!(twice.items[0].record.record_id, twice.items[1].record.record_id);
}

#[test]
fn corrupt_image_is_skipped_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::small_dump(dir.path(), 5, "");
    std::fs::write(dir.path().join("s3.png"), b"\x89PNG but not really").unwrap();
    let import = import_records(&manifest, Source::DatasetDump).unwrap();
    assert_eq!(import.items.len(), 4);
    assert_eq!(import.skipped.len(), 1);
    assert_eq!(import.skipped[0].line, 4);
}

#[test]
fn missing_manifest_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    assert!(import_records(&dir.path().join("nope.tsv"), Source::DatasetDump).is_err());
}

#[test]
fn reencoded_pixels_keep_their_record_id() {
    use image::codecs::png::{CompressionType, FilterType, PngEncoder};
    use image::ImageEncoder;
    let dir = tempfile::tempdir().unwrap();
    let img = tidepool::mock::synthetic_image("same", 70, 70);
    img.save(dir.path().join("a.png")).unwrap();
    let mut bytes = Vec::new();
    PngEncoder::new_with_quality(&mut bytes, CompressionType::Best, FilterType::Paeth)
        .write_image(img.as_raw(), 70, 70, image::ExtendedColorType::Rgba8)
        .unwrap();
    std::fs::write(dir.path().join("b.png"), &bytes).unwrap();
    assert_ne!(std::fs::read(dir.path().join("a.png")).unwrap(), bytes);
    std::fs::write(dir.path().join("m.tsv"), "a.png\nb.png\n").unwrap();
    let import = import_records(&dir.path().join("m.tsv"), Source::Web).unwrap();
    assert_eq!(import.items[0].record.record_id, import.items[1].record.record_id);
}
