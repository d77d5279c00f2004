mod common;

use std::fs;
use std::time::{Duration, Instant};

use common::*;
use teachhub::protocol::{ErrorCode, Message, ModeName, RoundStatusBody};
use teachhub::{start_hub, HubError, HubOptions};
use teachhub_core::annotations::NormalizedBox;
use teachhub_core::Store;

fn door() -> NormalizedBox {
    NormalizedBox::new(0, 0.5, 0.5, 0.2, 0.4)
}

#[tokio::test]
async fn fresh_hub_is_ready_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let hub = start_hub(&mock_config(&dir.path().join("store"), ""), HubOptions::default()).await.unwrap();
    let mut observer = TcpClient::connect(hub.tcp_addr()).await;
    observer.send(&hello(1, "observer")).await;
    let env = observer.recv_env().await;
    assert!(started.elapsed() < Duration::from_secs(2));
    let Message::RoundStatus(RoundStatusBody::Status(s)) = env.message else { panic!("{env:?}") };
    assert_eq!((s.mode, s.round, s.pending_count), (ModeName::Collecting, 1, 0));
    hub.shutdown().await;
}

#[tokio::test]
async fn port_in_use_names_the_port() {
    let dir = tempfile::tempdir().unwrap();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port();
    let mut config = mock_config(&dir.path().join("store"), "");
    config.listen_ws = format!("127.0.0.1:{port}");
    let err = start_hub(&config, HubOptions::default()).await.err().unwrap();
    assert!(matches!(&err, HubError::BindFailure { port: p, .. } if *p == port.to_string()), "{err}");
    assert!(err.to_string().contains(&port.to_string()));
}

#[tokio::test]
async fn missing_trainer_is_refused_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = mock_config(&dir.path().join("store"), "");
    config.trainer_cmd = "no-such-trainer-binary --fast".into();
    let err = start_hub(&config, HubOptions::default()).await.err().unwrap();
    assert!(matches!(err, HubError::PluginSpawnFailure { plugin: "trainer", .. }), "{err}");
    assert!(err.to_string().contains("trainer"));
    assert!(!dir.path().join("store").exists(), "nothing is created when startup is refused");
}

#[tokio::test]
async fn second_hub_on_the_same_store_is_locked_out() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("store");
    let hub = start_hub(&mock_config(&root, ""), HubOptions::default()).await.unwrap();
    let err = start_hub(&mock_config(&root, ""), HubOptions::default()).await.err().unwrap();
    assert!(matches!(err, HubError::StoreLocked(_)), "{err}");
    hub.shutdown().await;
    // Plugin processes forked by concurrently running tests can hold a copy of
    // the lock descriptor until they exec, so allow a short grace period.
    let deadline = Instant::now() + Duration::from_secs(5);
    let again = loop {
        match start_hub(&mock_config(&root, ""), HubOptions::default()).await {
            Err(HubError::StoreLocked(_)) if Instant::now() < deadline => tokio::time::sleep(Duration::from_millis(20)).await,
            other => break other.unwrap(),
        }
    };
    again.shutdown().await;
}

#[tokio::test]
async fn full_loop_over_tcp_and_websocket() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("store");
    let log = dir.path().join("trainer.log");
    let hub = start_hub(&mock_config(&root, &format!("--log {}", log.display())), HubOptions::default()).await.unwrap();

    let mut source = TcpClient::connect(hub.tcp_addr()).await;
    source.send(&hello(1, "source")).await;
    source.recv_env().await;
    let mut annotator = WsClient::connect(&hub.ws_url()).await;
    annotator.send(&hello(1, "annotator")).await;
    annotator.recv_env().await;

    for i in 0..3u64 {
        let id = format!("live{i}");
        let png = scene_png(640, 480, i, &[door()]);
        source.send(&frame(2 + i, &id, &png, 640, 480)).await;
        let seen = annotator.recv_until(|m| matches!(m, Message::Sip(s) if s.frame_id == id)).await;
        let Message::Sip(sip) = &seen.last().unwrap().message else { unreachable!() };
        assert_eq!((sip.width, sip.height, sip.model_version.as_str()), (640, 480, "v0"));
        annotator.send(&annotation(10 + i, &id, &[door()])).await;
        annotator.recv_until(|m| matches!(m, Message::SaveAck(a) if a.frame_id == id)).await;
    }
    // Malformed input gets a typed error instead of silence.
    annotator.send("{\"type\":\"annotation\",").await;
    let seen = annotator.recv_until(|m| matches!(m, Message::Error(_))).await;
    let Message::Error(e) = &seen.last().unwrap().message else { unreachable!() };
    assert_eq!(e.code, ErrorCode::Malformed);
    source.send_raw(b"\xff\xfe not utf8\n").await;
    let reply = source.recv().await;
    assert_eq!(error_code(&reply), Some(ErrorCode::Malformed), "{reply}");

    annotator.send(&line(30, Message::FinetuneRequest {})).await;
    let seen = annotator
        .recv_until(|m| matches!(m, Message::RoundStatus(RoundStatusBody::Status(s)) if s.mode == ModeName::Collecting && s.round == 2))
        .await;
    assert!(seen.iter().any(|e| matches!(&e.message, Message::ModelUpdated(u) if u.model_version == "v1")));
    let Message::RoundStatus(RoundStatusBody::Status(s)) = &seen.last().unwrap().message else { unreachable!() };
    assert!(s.raw_hades.is_some(), "embedder ran, so the round is scored");

    // The restarted detector reports the new version.
    source.send(&frame(40, "after", &scene_png(64, 48, 1, &[]), 64, 48)).await;
    let seen = annotator.recv_until(|m| matches!(m, Message::Sip(s) if s.frame_id == "after")).await;
    let Message::Sip(sip) = &seen.last().unwrap().message else { unreachable!() };
    assert_eq!(sip.model_version, "v1");

    let summary = hub.shutdown().await;
    assert_eq!(summary.trainer_runs, 1);
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 1);
    let store = summary.store;
    assert_eq!(store.manifest().samples.len(), 3);
    assert_eq!(store.registry().current.as_deref(), Some("v1"));
    let v1 = fs::read(store.weights_path(store.current_model().unwrap())).unwrap();
    assert_eq!(v1, b"mock fine-tune on 3 labeled samples\n");
    assert!(store.verify().is_consistent());
    drop(store);
    let deadline = Instant::now() + Duration::from_secs(5);
    while Store::open(&root).is_err() {
        assert!(Instant::now() < deadline, "shutdown releases the store");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

#[tokio::test]
async fn trainer_failure_restores_the_pool() {
    let dir = tempfile::tempdir().unwrap();
    let flag = dir.path().join("failed-once");
    let hub = start_hub(&mock_config(&dir.path().join("store"), &format!("--fail-once {}", flag.display())), HubOptions::default())
        .await
        .unwrap();
    let mut source = TcpClient::connect(hub.tcp_addr()).await;
    source.send(&hello(1, "source")).await;
    source.recv_env().await;
    let mut annotator = WsClient::connect(&hub.ws_url()).await;
    annotator.send(&hello(1, "annotator")).await;
    annotator.recv_env().await;
    source.send(&frame(2, "only", &scene_png(32, 32, 0, &[]), 32, 32)).await;
    annotator.recv_until(|m| matches!(m, Message::Sip(_))).await;
    annotator.send(&annotation(2, "only", &[door()])).await;
    annotator.recv_until(|m| matches!(m, Message::SaveAck(_))).await;

    annotator.send(&line(3, Message::FinetuneRequest {})).await;
    annotator.recv_until(|m| matches!(m, Message::RoundStatus(RoundStatusBody::Status(s)) if s.mode == ModeName::Training)).await;
    let seen = annotator
        .recv_until(|m| matches!(m, Message::RoundStatus(RoundStatusBody::Status(s)) if s.mode == ModeName::Collecting))
        .await;
    let Message::RoundStatus(RoundStatusBody::Status(s)) = &seen.last().unwrap().message else { unreachable!() };
    assert_eq!((s.round, s.pending_count, s.model_version.as_deref()), (1, 1, Some("v0")));
    let summary = hub.shutdown().await;
    assert_eq!(summary.store.ledger().failed_attempts.len(), 1);
}
