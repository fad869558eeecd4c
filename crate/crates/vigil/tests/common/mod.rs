#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use vigil::service::{router, AppState, SessionDefaults};
use vigil::FrameworkConfig;
use vigil_core::runner::{
    run_episode, train, EpisodeConfig, EpisodeLog, Harness, Monitor, PolicySpec, StartSpec,
    TickRecord, Trained,
};
use vigil_core::simenv::{AnomalyKind, AnomalySpec};

pub fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let cfg = FrameworkConfig::default();
        let base = Harness::new(cfg.sim.clone(), Arc::new(cfg.policy), None);
        train(&base, &cfg.suite.nominal_start(), cfg.suite.h_max, &cfg.training).unwrap()
    })
}

pub fn monitored_harness() -> Harness {
    let cfg = FrameworkConfig::default();
    let t = trained();
    let m = Monitor::new(t.detector.clone(), t.success_model.clone(), cfg.recovery).unwrap();
    Harness::new(cfg.sim.clone(), Arc::new(cfg.policy), Some(m))
}

/// Monitored, with an arm slow enough that a live client can act before
/// the reach completes.
pub fn live_harness() -> Harness {
    let mut h = monitored_harness();
    h.sim.a_max = LIVE_A_MAX;
    h
}

pub fn baseline_harness() -> Harness {
    let cfg = FrameworkConfig::default();
    Harness::new(cfg.sim, Arc::new(PolicySpec::default()), None)
}

/// Serves `harness` on an ephemeral port.
pub async fn spawn_service(harness: Harness) -> String {
    let state = AppState::new(harness, SessionDefaults::from_config(&FrameworkConfig::default()));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr: SocketAddr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, router(state)).await.unwrap();
    });
    format!("127.0.0.1:{}", addr.port())
}

pub struct Client {
    pub http: reqwest::Client,
    pub base: String,
}

impl Client {
    pub fn new(addr: &str) -> Self {
        Client {
            http: reqwest::Client::new(),
            base: format!("http://{addr}"),
        }
    }

    pub async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self
            .http
            .post(format!("{}{}", self.base, path))
            .json(&body)
            .send()
            .await
            .unwrap();
        (r.status().as_u16(), r.json().await.unwrap_or(Value::Null))
    }

    pub async fn post_raw(&self, path: &str, body: &'static str) -> (u16, Value) {
        let r = self
            .http
            .post(format!("{}{}", self.base, path))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .await
            .unwrap();
        (r.status().as_u16(), r.json().await.unwrap_or(Value::Null))
    }

    pub async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.http.get(format!("{}{}", self.base, path)).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap_or(Value::Null))
    }

    pub async fn delete(&self, path: &str) -> (u16, Value) {
        let r = self.http.delete(format!("{}{}", self.base, path)).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap_or(Value::Null))
    }

    pub async fn new_session(&self) -> String {
        let (status, body) = self.post("/sessions", json!({})).await;
        assert_eq!(status, 201, "{body}");
        body["id"].as_str().unwrap().to_string()
    }
}

pub type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

pub async fn subscribe(addr: &str, id: &str) -> Ws {
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{id}/stream"))
        .await
        .unwrap();
    ws
}

/// Next JSON text frame, or `None` once the server closes the stream.
pub async fn next_frame(ws: &mut Ws) -> Option<Value> {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(30), ws.next())
            .await
            .expect("stream stalled")?;
        match msg.unwrap() {
            Message::Text(t) => return Some(serde_json::from_str(&t).unwrap()),
            Message::Close(_) => return None,
            _ => {}
        }
    }
}

pub async fn send_text(ws: &mut Ws, text: &str) {
    ws.send(Message::Text(text.into())).await.unwrap();
}

/// Every frame until the stream closes.
pub async fn drain(ws: &mut Ws) -> Vec<Value> {
    let mut out = Vec::new();
    while let Some(f) = next_frame(ws).await {
        out.push(f);
    }
    out
}

pub fn records(frames: &[Value]) -> Vec<TickRecord> {
    frames
        .iter()
        .filter(|f| f["type"] == "tick")
        .map(|f| serde_json::from_value(f["record"].clone()).unwrap())
        .collect()
}

pub const LIVE_START: [f64; 2] = [0.31, 0.27];
pub const LIVE_A_MAX: f64 = 0.004;
pub const LIVE_SEED: u64 = 41;

pub struct LiveRun {
    pub frames: Vec<Value>,
    pub log: EpisodeLog,
    pub injected_at: u64,
    pub cleared_at: u64,
}

/// Starts a monitored session, blacks out the camera right after the first
/// tick and clears it five ticks after it took effect.
pub async fn scripted_live_run(addr: &str, rate_hz: f64) -> LiveRun {
    let c = Client::new(addr);
    let id = c.new_session().await;
    let mut ws = subscribe(addr, &id).await;
    let (status, body) = c
        .post(
            &format!("/sessions/{id}/start"),
            json!({
                "seed": LIVE_SEED,
                "start": {"mode": "explicit", "position": LIVE_START},
                "tick_rate_hz": rate_hz,
            }),
        )
        .await;
    assert_eq!(status, 200, "{body}");

    let mut frames = vec![next_frame(&mut ws).await.unwrap()];
    assert_eq!(frames[0]["record"]["tick"], 0);
    let blackout = serde_json::to_value(AnomalyKind::full_frame(16, 0.0)).unwrap();
    let (status, body) = c.post(&format!("/sessions/{id}/anomaly"), blackout).await;
    assert_eq!(status, 200, "{body}");
    let injected_at = body["applied_at_tick"].as_u64().unwrap();

    let mut cleared_at = None;
    while let Some(f) = next_frame(&mut ws).await {
        let tick = f["record"]["tick"].as_u64();
        frames.push(f);
        if cleared_at.is_none() && tick.is_some_and(|t| t >= injected_at + 5) {
            let (status, body) = c
                .delete(&format!("/sessions/{id}/anomaly/occlude_patch"))
                .await;
            assert_eq!(status, 200, "{body}");
            assert_eq!(body["removed"], 1);
            cleared_at = body["applied_at_tick"].as_u64();
        }
    }
    let (status, log) = c.get(&format!("/sessions/{id}/log")).await;
    assert_eq!(status, 200, "{log}");
    LiveRun {
        frames,
        log: serde_json::from_value(log).unwrap(),
        injected_at,
        cleared_at: cleared_at.expect("episode ended before the anomaly was cleared"),
    }
}

/// The batch episode equivalent to [`scripted_live_run`].
pub fn batch_equivalent(harness: &Harness, run: &LiveRun) -> EpisodeLog {
    let cfg = EpisodeConfig {
        index: 0,
        label: "live".into(),
        h_max: FrameworkConfig::default().suite.h_max,
        seed: LIVE_SEED,
        start: StartSpec::Explicit {
            position: LIVE_START,
        },
        anomaly_schedule: vec![AnomalySpec::new(
            AnomalyKind::full_frame(16, 0.0),
            run.injected_at,
            Some(run.cleared_at - run.injected_at),
        )],
        monitoring_enabled: true,
    };
    run_episode(harness, cfg).unwrap()
}
