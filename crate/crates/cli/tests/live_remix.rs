mod common;

use std::time::{Duration, Instant};

use common::*;
use drmx_core::live::decode_block;
use drmx_core::spectral::{StftConfig, StftPlan};
use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;

async fn spawn(fx: &Fixture) -> std::net::SocketAddr {
    let app = fx.router();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    addr
}

/// Hann-windowed energy between 1 and 7 kHz of 512 samples ending at `end`.
fn band_energy(x: &[f64], end: usize) -> f64 {
    let plan = StftPlan::new(StftConfig::for_rate(16000).unwrap());
    let win = plan.config().analysis_window();
    let frame: Vec<f64> = x[end - 512..end]
        .iter()
        .zip(&win)
        .map(|(s, w)| s * w)
        .collect();
    let spec = plan.dft(&frame);
    (32..224).map(|k| spec[k].norm_sqr()).sum()
}

struct Stream {
    ready: Value,
    samples: Vec<f64>,
    texts: Vec<Value>,
    ack_delay: Option<Duration>,
}

async fn run_stream(
    addr: std::net::SocketAddr,
    query: &str,
    send_after_blocks: Option<(usize, Value)>,
) -> Stream {
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/live-remix?{query}"))
        .await
        .unwrap();
    let Some(Ok(Message::Text(first))) = ws.next().await else {
        panic!("no ready message")
    };
    let ready: Value = serde_json::from_str(&first).unwrap();
    assert_schema("live-remix.server", &ready);
    let block_len = ready["block_len"].as_u64().unwrap() as usize;
    let mut samples = Vec::new();
    let mut texts = Vec::new();
    let mut blocks = 0;
    let mut pending = send_after_blocks;
    let mut sent_at = None;
    let mut ack_delay = None;
    while let Some(msg) = ws.next().await {
        match msg.unwrap() {
            Message::Binary(bytes) => {
                let block = decode_block(&bytes).unwrap();
                assert_eq!(block.len(), block_len);
                assert_eq!(
                    u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize,
                    block_len
                );
                samples.extend(block.iter().map(|&v| v as f64));
                blocks += 1;
                if let Some((_, update)) = pending.take_if(|(n, _)| blocks == *n) {
                    assert_schema("live-remix.client", &update);
                    ws.send(Message::Text(update.to_string().into()))
                        .await
                        .unwrap();
                    sent_at = Some(Instant::now());
                }
            }
            Message::Text(text) => {
                let v: Value = serde_json::from_str(&text).unwrap();
                assert_schema("live-remix.server", &v);
                if v["type"] == "applied" && ack_delay.is_none() {
                    ack_delay = sent_at.map(|t| t.elapsed());
                }
                let end = v["type"] == "end";
                texts.push(v);
                if end {
                    break;
                }
            }
            Message::Close(_) => break,
            _ => {}
        }
    }
    assert_eq!(blocks, ready["total_blocks"].as_u64().unwrap() as usize);
    Stream {
        ready,
        samples,
        texts,
        ack_delay,
    }
}

#[tokio::test]
async fn ready_message_and_framing() {
    let fx = Fixture::new();
    let addr = spawn(&fx).await;
    let s = run_stream(addr, "item=tone&masker=oracle&pace=false", None).await;
    assert_eq!(s.ready["sample_rate"], 16000);
    assert_eq!(s.ready["block_len"], 256);
    assert_eq!(s.ready["latency_samples"], 768);
    assert_eq!(s.ready["latency_ms"], 48.0);
    assert_eq!(s.texts.last().unwrap()["type"], "end");
    // 3 s of input plus the latency tail.
    assert!(s.samples.len() >= 48000 + 768);
}

#[tokio::test]
async fn invalid_updates_get_error_replies() {
    let fx = Fixture::new();
    let addr = spawn(&fx).await;
    let (mut ws, _) =
        tokio_tungstenite::connect_async(format!("ws://{addr}/live-remix?item=tone&pace=true"))
            .await
            .unwrap();
    ws.next().await.unwrap().unwrap();
    ws.send(Message::Text("{\"alpha_db\": \"loud\"}".into()))
        .await
        .unwrap();
    loop {
        if let Message::Text(t) = ws.next().await.unwrap().unwrap() {
            let v: Value = serde_json::from_str(&t).unwrap();
            assert_schema("live-remix.server", &v);
            assert_eq!(v["type"], "error");
            break;
        }
    }
    ws.close(None).await.unwrap();
}

#[tokio::test]
async fn unknown_item_and_missing_weights_are_http_errors() {
    let fx = Fixture::new();
    let addr = spawn(&fx).await;
    for (query, code) in [
        ("item=zzz", 404),
        ("masker=lstm", 422),
        ("masker=magic", 422),
    ] {
        let err = tokio_tungstenite::connect_async(format!("ws://{addr}/live-remix?{query}"))
            .await
            .unwrap_err();
        match err {
            tokio_tungstenite::tungstenite::Error::Http(resp) => {
                assert_eq!(resp.status().as_u16(), code, "{query}")
            }
            other => panic!("{query}: {other}"),
        }
    }
}

#[tokio::test]
async fn alpha_change_drops_background_band_within_250ms() {
    let fx = Fixture::new();
    let addr = spawn(&fx).await;
    let s = run_stream(
        addr,
        "item=tone&masker=oracle&pace=true&alpha_db=0",
        Some((40, json!({ "alpha_db": -60.0 }))),
    )
    .await;
    let ack = s
        .texts
        .iter()
        .find(|t| t["type"] == "applied")
        .expect("update acknowledged");
    assert_eq!(ack["alpha_db"], -60.0);
    assert_eq!(ack["lambda_db"], -7.0);
    let at = ack["applied_at_sample"].as_u64().unwrap() as usize;
    assert_eq!(at % 256, 0, "applied on a block boundary");
    let delay = s.ack_delay.unwrap();
    assert!(delay <= Duration::from_millis(250), "ack after {delay:?}");

    let quarter = 4000;
    assert!(at >= quarter && at + quarter <= s.samples.len());
    let before = band_energy(&s.samples, at);
    let after = band_energy(&s.samples, at + quarter);
    let drop = 10.0 * (before / after).log10();
    assert!(drop >= 40.0, "background band dropped {drop:.1} dB");
}
