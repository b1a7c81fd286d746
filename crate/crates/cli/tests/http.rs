use std::net::SocketAddr;
use std::path::Path;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use sensa::api::ApiStateSummary;
use sensa::server::{self, AppState, Persistence};
use sensa_core::campaign::log::write_jsonl;
use sensa_core::campaign::CampaignConfig;
use sensa_core::model::{BuiltinModel, EvaluatorSpec};
use sensa_core::{CampaignState, CampaignStatus};

fn config(batch: usize) -> CampaignConfig {
    CampaignConfig::new(
        3,
        3,
        batch,
        EvaluatorSpec::Builtin {
            model: BuiltinModel::Synthetic,
        },
    )
}

struct Server {
    base: String,
    agent: ureq::Agent,
}

impl Server {
    fn start(state: CampaignState, persistence: Option<Persistence>) -> Self {
        let app = AppState::new(state, persistence);
        let (tx, rx) = mpsc::channel::<SocketAddr>();
        thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                tx.send(listener.local_addr().unwrap()).unwrap();
                server::serve(listener, app).await.unwrap();
            });
        });
        let addr = rx.recv().unwrap();
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        Server {
            base: format!("http://{addr}"),
            agent,
        }
    }

    fn fresh(batch: usize) -> Self {
        Self::start(CampaignState::new(config(batch)).unwrap(), None)
    }

    fn get(&self, path: &str) -> (u16, Value) {
        let mut resp = self.agent.get(format!("{}{path}", self.base)).call().unwrap();
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_json().unwrap())
    }

    fn send(&self, method: &str, path: &str, body: &str) -> (u16, Value) {
        let url = format!("{}{path}", self.base);
        let mut resp = match method {
            "POST" => self
                .agent
                .post(url)
                .header("content-type", "application/json")
                .send(body)
                .unwrap(),
            "DELETE" => self.agent.delete(url).call().unwrap(),
            _ => unreachable!(),
        };
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_json().unwrap())
    }

    fn state(&self) -> ApiStateSummary {
        let (status, body) = self.get("/api/state");
        assert_eq!(status, 200);
        serde_json::from_value(body).unwrap()
    }

    /// Polls until the runner is idle, checking the version never decreases.
    fn wait_idle(&self) -> ApiStateSummary {
        let deadline = Instant::now() + Duration::from_secs(60);
        let mut last = 0;
        loop {
            let s = self.state();
            assert!(s.version >= last, "version went from {last} to {}", s.version);
            last = s.version;
            if !s.runner.active {
                return s;
            }
            assert!(Instant::now() < deadline, "runner did not finish");
            thread::sleep(Duration::from_millis(20));
        }
    }
}

#[test]
fn fresh_campaign_state() {
    let srv = Server::fresh(10);
    let s = srv.state();
    assert_eq!(s.version, 1);
    assert_eq!(s.status, CampaignStatus::Idle);
    assert_eq!((s.m, s.n, s.batch_size), (3, 3, 10));
    assert_eq!(s.batches_completed, 0);
    assert!(s.variance.is_none() && s.total.is_none());
    assert!(!s.runner.active);

    let (status, density) = srv.get("/api/density/2");
    assert_eq!(status, 200);
    assert_eq!(density["breakpoints"], json!([0.0, 1.0]));
    assert_eq!(density["values"], json!([1.0]));
    assert_eq!(density["dimension"], json!(2));

    let (status, err) = srv.get("/api/cumulative/1?output=1");
    assert_eq!(status, 404);
    assert!(err["error"].as_str().unwrap().contains("insufficient data"));
}

#[test]
fn alpha_zero_run_gives_uniform_density() {
    let srv = Server::fresh(10);
    let (status, queued) = srv.send("POST", "/api/control/alpha", r#"{"value": 0}"#);
    assert_eq!(status, 202);
    assert_eq!(queued["queue_position"], json!(1));
    assert_eq!(srv.state().pending.len(), 1);

    let (status, accepted) = srv.send("POST", "/api/control/run", r#"{"batches": 3}"#);
    assert_eq!(status, 202);
    assert_eq!(accepted["remaining"], json!(3));
    let s = srv.wait_idle();
    assert_eq!(s.batches_completed, 3);
    assert_eq!(s.total_evaluations, 3 * 10 * 5);
    assert_eq!(s.alpha, 0.0);
    assert!(s.pending.is_empty());
    assert!(s.runner.last_error.is_none());
    assert!(s.total.is_some());

    for dim in 1..=3 {
        let (status, d) = srv.get(&format!("/api/density/{dim}"));
        assert_eq!(status, 200);
        let bps: Vec<f64> = serde_json::from_value(d["breakpoints"].clone()).unwrap();
        let vals: Vec<f64> = serde_json::from_value(d["values"].clone()).unwrap();
        assert_eq!((bps[0], *bps.last().unwrap()), (0.0, 1.0));
        for v in vals {
            assert!((v - 1.0).abs() < 1e-9, "dim {dim}: {v}");
        }
    }

    let (status, curve) = srv.get("/api/cumulative/1?output=2");
    assert_eq!(status, 200);
    let cum: Vec<f64> = serde_json::from_value(curve["cumulative"].clone()).unwrap();
    let t = s.total.unwrap()[0][1].unwrap();
    assert!((cum.last().unwrap() - t).abs() <= 1e-9 * t.abs());
}

#[test]
fn rejects_invalid_requests() {
    let srv = Server::fresh(10);
    let (status, err) = srv.send(
        "POST",
        "/api/control/override",
        r#"{"dim": 1, "breakpoints": [0, 0.5, 1], "values": [1, -1]}"#,
    );
    assert_eq!(status, 400);
    assert_eq!(err["field"], json!("values"));

    let (status, err) = srv.send("POST", "/api/control/alpha", r#"{"value": "high"}"#);
    assert_eq!(status, 400);
    assert_eq!(err["line"], json!(1));
    assert!(err["column"].as_u64().unwrap() > 0);

    let (status, err) = srv.send("POST", "/api/control/alpha", "{}");
    assert_eq!(status, 400);
    assert_eq!(err["field"], json!("value"));

    let (status, err) = srv.send("POST", "/api/control/run", r#"{"batches": -2}"#);
    assert_eq!(status, 400, "{err}");

    let (status, err) = srv.get("/api/density/0");
    assert_eq!(status, 400);
    assert_eq!(err["field"], json!("dim"));
    let (status, _) = srv.get("/api/density/1?output=4");
    assert_eq!(status, 400);

    let (status, err) = srv.send("POST", "/api/ingest", "{\"k\": 1}\nnot json\n");
    assert_eq!(status, 400);
    assert!(err["line"].as_u64().is_some(), "{err}");

    // Nothing above reached the campaign.
    let s = srv.state();
    assert_eq!(s.version, 1);
    assert!(s.pending.is_empty());
}

#[test]
fn overrides_queue_and_clear() {
    let srv = Server::fresh(10);
    let (status, q) = srv.send(
        "POST",
        "/api/control/override",
        r#"{"dim": 3, "breakpoints": [0.9, 1.0], "values": [1]}"#,
    );
    assert_eq!(status, 202);
    assert_eq!(q["queue_position"], json!(1));
    srv.send("POST", "/api/control/run", r#"{"batches": 1}"#);
    let s = srv.wait_idle();
    assert_eq!(s.overrides, vec![3]);
    assert!(s.biased_by_adaptive_sampling);

    let (_, samples) = srv.get("/api/samples?dims=3");
    for p in samples["points"].as_array().unwrap() {
        let x = p[0].as_f64().unwrap();
        assert!((0.9..=1.0).contains(&x), "{x}");
    }

    let (status, q) = srv.send("DELETE", "/api/control/override/3", "");
    assert_eq!(status, 202);
    let v = q["version"].as_u64().unwrap();
    srv.send("POST", "/api/control/run", r#"{"batches": 1}"#);
    let s = srv.wait_idle();
    assert!(s.overrides.is_empty());
    assert!(s.version > v);
    assert!(s.biased_by_adaptive_sampling);
}

#[test]
fn samples_are_filtered_and_limited() {
    let srv = Server::fresh(4);
    srv.send("POST", "/api/control/run", r#"{"batches": 2}"#);
    srv.wait_idle();
    let (status, all) = srv.get("/api/samples");
    assert_eq!(status, 200);
    assert_eq!(all["points"].as_array().unwrap().len(), 2 * 4 * 2);
    assert_eq!(all["dims"], json!([1, 2, 3]));

    let (status, some) = srv.get("/api/samples?dims=1%2C3&limit=3");
    assert_eq!(status, 200);
    let points = some["points"].as_array().unwrap();
    assert_eq!(points.len(), 3);
    assert_eq!(some["batches"], json!([2, 2, 2]));
    let last = all["points"].as_array().unwrap().last().unwrap();
    assert_eq!(points[2], json!([last[0], last[2]]));
}

#[test]
fn ingest_adds_foreign_evaluations() {
    let mut other = CampaignState::new(config(6)).unwrap();
    let mut ev = other.config().evaluator.instantiate(3).unwrap();
    other.run_batch(ev.as_mut()).unwrap();
    let log = write_jsonl(other.blocks(), other.config());

    let srv = Server::fresh(6);
    let (status, body) = srv.send("POST", "/api/ingest", &log);
    assert_eq!(status, 200, "{body}");
    assert_eq!(body["blocks"], json!(6));
    let s = srv.state();
    assert_eq!(s.ingested_blocks, 6);
    assert_eq!(s.total_evaluations, 30);
    assert_eq!(s.version, body["version"].as_u64().unwrap());
    let expected = other.indices().unwrap();
    let total = s.total.unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(total[i][j], expected.total(i, j));
        }
    }

    // The same rows again collide.
    let (status, _) = srv.send("POST", "/api/ingest", &log);
    assert_eq!(status, 400);
}

#[test]
fn pause_stops_and_resume_continues() {
    let srv = Server::fresh(200);
    srv.send("POST", "/api/control/run", r#"{"batches": 12}"#);
    let deadline = Instant::now() + Duration::from_secs(30);
    while srv.state().batches_completed == 0 {
        assert!(Instant::now() < deadline);
        thread::sleep(Duration::from_millis(5));
    }
    let (status, _) = srv.send("POST", "/api/control/pause", "");
    assert_eq!(status, 200);
    let paused = srv.wait_idle();
    assert_eq!(paused.status, CampaignStatus::Paused);
    assert!(paused.batches_completed < 12, "finished before the pause took effect");
    assert!(paused.runner.remaining > 0);

    let (status, _) = srv.send("POST", "/api/control/resume", "");
    assert_eq!(status, 200);
    let done = srv.wait_idle();
    assert_eq!(done.status, CampaignStatus::Idle);
    assert_eq!(done.batches_completed, 12);
    assert_eq!(done.runner.remaining, 0);
}

#[test]
fn run_after_max_batches_conflicts() {
    let mut cfg = config(4);
    cfg.max_batches = Some(1);
    let srv = Server::start(CampaignState::new(cfg).unwrap(), None);
    srv.send("POST", "/api/control/run", r#"{"batches": 5}"#);
    let s = srv.wait_idle();
    assert_eq!(s.status, CampaignStatus::Done);
    assert_eq!(s.batches_completed, 1);
    let (status, _) = srv.send("POST", "/api/control/run", r#"{"batches": 1}"#);
    assert_eq!(status, 409);
}

fn line_count(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn server_persists_state_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let persistence = Persistence {
        state: dir.path().join("state.json"),
        log: dir.path().join("state.json.jsonl"),
    };
    let srv = Server::start(CampaignState::new(config(5)).unwrap(), Some(persistence.clone()));
    srv.send("POST", "/api/control/alpha", r#"{"value": 1.5}"#);
    srv.send("POST", "/api/control/run", r#"{"batches": 2}"#);
    let s = srv.wait_idle();

    let saved = CampaignState::load(&persistence.state).unwrap();
    assert_eq!(saved.version(), s.version);
    assert_eq!(saved.alpha(), 1.5);
    assert_eq!(saved.blocks().len(), 10);
    assert_eq!(line_count(&persistence.log), 10 * 5);
}
