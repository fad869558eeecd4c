mod common;

use serde_json::{json, Value};

use common::*;
use vigil_core::anomaly::Decision;
use vigil_core::recovery::Stage;
use vigil_core::runner::{target_in_window, ActionKind};
use vigil_core::simenv::SimConfig;

fn assert_ordered(frames: &[Value]) {
    let ticks: Vec<u64> = records(frames).iter().map(|r| r.tick).collect();
    assert_eq!(ticks, (0..ticks.len() as u64).collect::<Vec<_>>());
    let last = frames.last().unwrap();
    assert_eq!(last["type"], "end");
    assert_eq!(last["total_ticks"], ticks.len() as u64);
    assert_eq!(frames.iter().filter(|f| f["type"] == "end").count(), 1);
    assert!(frames.iter().all(|f| f["schema"] == vigil_core::SCHEMA));
}

#[tokio::test(flavor = "multi_thread")]
async fn healthz_answers() {
    let addr = spawn_service(baseline_harness()).await;
    let (status, body) = Client::new(&addr).get("/healthz").await;
    assert_eq!(status, 200);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["schema"], vigil_core::SCHEMA);
}

#[tokio::test(flavor = "multi_thread")]
async fn session_lifecycle_and_errors() {
    let addr = spawn_service(baseline_harness()).await;
    let c = Client::new(&addr);
    let id = c.new_session().await;
    let (status, body) = c.get(&format!("/sessions/{id}")).await;
    assert_eq!(status, 200);
    assert_eq!(body["state"], "configured");

    assert_eq!(c.get("/sessions/999").await.0, 404);
    assert_eq!(c.get("/sessions/abc").await.0, 404);
    let (status, _) = c
        .post(&format!("/sessions/{id}/anomaly"), json!({"type": "target_removed"}))
        .await;
    assert_eq!(status, 409);
    assert_eq!(c.get(&format!("/sessions/{id}/log")).await.0, 409);

    // Bad start requests leave the session startable.
    let (status, body) = c.post_raw(&format!("/sessions/{id}/start"), "{not json").await;
    assert_eq!(status, 400);
    assert!(body["error"].as_str().unwrap().contains("malformed"));
    let (status, body) = c.post(&format!("/sessions/{id}/start"), json!({"h_maxx": 3})).await;
    assert_eq!(status, 400, "{body}");
    let (status, _) = c.post(&format!("/sessions/{id}/start"), json!({"tick_rate_hz": 0.0})).await;
    assert_eq!(status, 422);

    let (status, body) = c
        .post(&format!("/sessions/{id}/start"), json!({
                "h_max": 30,
                "tick_rate_hz": 20.0,
                "anomaly_schedule": [{"type": "target_removed", "start_tick": 0}],
            }))
        .await;
    assert_eq!(status, 200, "{body}");
    assert_eq!(body["config"]["h_max"], 30);
    assert_eq!(body["config"]["monitoring_enabled"], false);
    let (status, _) = c.post(&format!("/sessions/{id}/start"), json!({})).await;
    assert_eq!(status, 409);

    // Malformed and invalid injections are rejected; the session keeps going.
    let anomaly = format!("/sessions/{id}/anomaly");
    assert_eq!(c.post_raw(&anomaly, "[1, 2").await.0, 400);
    assert_eq!(c.post(&anomaly, json!({"type": "smoke"})).await.0, 400);
    assert_eq!(c.post(&anomaly, json!({"type": "blur", "kernel_px": 4})).await.0, 422);
    assert_eq!(c.post(&anomaly, json!({"type": "blur", "kernel_px": 3, "start_tick": 0})).await.0, 422);
    assert_eq!(c.delete(&format!("/sessions/{id}/anomaly/smoke")).await.0, 422);
    let (status, body) = c.post(&anomaly, json!({"type": "blur", "kernel_px": 3, "duration_ticks": 2})).await;
    assert_eq!(status, 200, "{body}");
    assert_eq!(body["spec"]["kernel_px"], 3);
    let (status, body) = c.delete(&format!("/sessions/{id}/anomaly/freeze_frame")).await;
    assert_eq!(status, 200);
    assert_eq!(body["removed"], 0);

    let mut ws = subscribe(&addr, &id).await;
    let frames = drain(&mut ws).await;
    assert_ordered(&frames);
    let (status, body) = c.get(&format!("/sessions/{id}")).await;
    assert_eq!(status, 200);
    assert_eq!(body["state"], "finished");
    assert_eq!(c.post(&anomaly, json!({"type": "target_removed"})).await.0, 409);
    assert_eq!(c.get(&format!("/sessions/{id}/log")).await.0, 200);
}

#[tokio::test(flavor = "multi_thread")]
async fn subscribers_see_identical_ordered_streams() {
    let addr = spawn_service(monitored_harness()).await;
    let c = Client::new(&addr);
    let id = c.new_session().await;
    let mut early = subscribe(&addr, &id).await;
    let (status, _) = c
        .post(
            &format!("/sessions/{id}/start"),
            json!({
                "tick_rate_hz": 40.0,
                "start": {"mode": "explicit", "position": [0.31, 0.27]},
                "anomaly_schedule": [{"type": "occlude_patch", "center_px": [8, 8], "size_px": 16, "intensity": 0.0, "start_tick": 1, "duration_ticks": 10}],
            }),
        )
        .await;
    assert_eq!(status, 200);
    // Joins mid-episode and still gets everything from tick 0.
    let mut first = next_frame(&mut early).await.unwrap();
    let mut late = subscribe(&addr, &id).await;
    let mut a = vec![first.take()];
    a.extend(drain(&mut early).await);
    let b = drain(&mut late).await;
    assert_ordered(&a);
    assert_eq!(a, b);
    // And after the end.
    let mut after = subscribe(&addr, &id).await;
    assert_eq!(drain(&mut after).await, a);
}

#[tokio::test(flavor = "multi_thread")]
async fn client_messages_get_error_frames() {
    let addr = spawn_service(baseline_harness()).await;
    let c = Client::new(&addr);
    let id = c.new_session().await;
    let mut ws = subscribe(&addr, &id).await;
    send_text(&mut ws, "{\"type\": \"inject\"").await;
    let reply = next_frame(&mut ws).await.unwrap();
    assert_eq!(reply["type"], "error");
    let (status, _) = c.post(&format!("/sessions/{id}/start"), json!({
        "h_max": 5,
        "tick_rate_hz": 50.0,
        "anomaly_schedule": [{"type": "target_removed", "start_tick": 0}],
    })).await;
    assert_eq!(status, 200);
    let frames = drain(&mut ws).await;
    assert_ordered(&frames);
    assert_eq!(records(&frames).len(), 5);
}

#[tokio::test(flavor = "multi_thread")]
async fn injection_lands_on_the_reported_tick_and_the_pause_shows_live() {
    let sim = SimConfig::default();
    assert!(target_in_window(&sim, LIVE_START));
    let addr = spawn_service(live_harness()).await;
    let run = scripted_live_run(&addr, 10.0).await;
    let recs = records(&run.frames);
    assert_ordered(&run.frames);
    for r in &recs {
        let inside = r.tick >= run.injected_at && r.tick < run.cleared_at;
        assert_eq!(r.anomaly_active, inside, "tick {}", r.tick);
    }
    // Score above tau* on the first blacked-out frame, then a pause.
    let hit = &recs[run.injected_at as usize];
    assert_eq!(hit.decision, Some(Decision::Anomalous));
    assert!(hit.distance_score.unwrap() > hit.tau_star.unwrap());
    assert_eq!(hit.recovery_stage, Some(Stage::Er1));
    assert_eq!(hit.action_kind, ActionKind::Wait);
    // Once the camera is back, the policy resumes and finishes the reach.
    let resumed = recs
        .iter()
        .find(|r| r.tick >= run.cleared_at && r.decision == Some(Decision::Nominal))
        .expect("no nominal frame after clearing");
    assert_eq!(resumed.recovery_stage, Some(Stage::Idle));
    assert_eq!(run.frames.last().unwrap()["outcome"], "success");
    // Scenes mirror the active anomaly list.
    let scene_active = |t: u64| run.frames[t as usize]["scene"]["active_anomalies"].as_array().unwrap().len();
    assert_eq!(scene_active(run.injected_at), 1);
    assert_eq!(scene_active(run.cleared_at), 0);
}

#[tokio::test(flavor = "multi_thread")]
async fn live_episode_equals_batch_schedule() {
    let harness = live_harness();
    let addr = spawn_service(harness.clone()).await;
    let run = scripted_live_run(&addr, 20.0).await;
    let batch = batch_equivalent(&harness, &run);
    assert_eq!(records(&run.frames), batch.records);
    assert_eq!(run.log.records, batch.records);
    assert_eq!(run.log.outcome, batch.outcome);
    assert_eq!(run.log.total_ticks, batch.total_ticks);
    assert_eq!(run.log.stage_report, batch.stage_report);
}

#[tokio::test(flavor = "multi_thread")]
async fn taken_port_fails_at_bind() {
    let held = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let port = held.local_addr().unwrap().port();
    assert!(vigil::service::bind("127.0.0.1", port).await.is_err());
}
