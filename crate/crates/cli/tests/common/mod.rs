#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use drmx_cli::catalogue::{save_item, write_manifest};
use drmx_cli::service::{build_state, router, ServiceConfig};
use drmx_core::stimulus::{build_stimulus_set, ConditionSpec};
use drmx_core::trainer::{synth_mixture, MixtureKind};
use drmx_core::{AudioBuffer, BackgroundClass, NmfConfig, RemixParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tower::ServiceExt;

pub const TONE_HZ: f64 = 440.0;

/// Tone (speech stand-in) plus white noise at 16 kHz.
pub fn tone_noise(seconds: f64, seed: u64) -> (AudioBuffer, AudioBuffer) {
    let rate = 16000;
    let len = (seconds * rate as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tone: Vec<f64> = (0..len)
        .map(|i| 0.5 * (2.0 * PI * TONE_HZ * i as f64 / rate as f64).sin())
        .collect();
    let noise: Vec<f64> = (0..len).map(|_| rng.random_range(-0.2..0.2)).collect();
    (
        AudioBuffer::mono(rate, tone).unwrap(),
        AudioBuffer::mono(rate, noise).unwrap(),
    )
}

/// Two items: `item01` (synthetic 0 dB mixture with original, nmf and
/// oracle) and `tone` (tone + noise with original and oracle).
pub fn build_catalogue(root: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = synth_mixture(&mut rng, 2.0, 0.0, MixtureKind::TonesVsNoise, 16000).unwrap();
    let specs = [
        ConditionSpec::Original,
        ConditionSpec::Nmf {
            config: NmfConfig::default(),
            vad: None,
        },
        ConditionSpec::Oracle,
    ];
    let set = build_stimulus_set(
        "item01",
        BackgroundClass::Sports,
        &m.speech,
        &m.background,
        None,
        &specs,
        RemixParams::default(),
    )
    .unwrap();
    let first = save_item(root, &set, &m.speech, &m.background).unwrap();

    let (tone, noise) = tone_noise(3.0, 5);
    let specs = [ConditionSpec::Original, ConditionSpec::Oracle];
    let set = build_stimulus_set(
        "tone",
        BackgroundClass::Environment,
        &tone,
        &noise,
        None,
        &specs,
        RemixParams::default(),
    )
    .unwrap();
    let second = save_item(root, &set, &tone, &noise).unwrap();
    write_manifest(root, vec![first, second]).unwrap();
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        build_catalogue(&dir.path().join("stimuli"));
        Self { dir }
    }

    pub fn stimuli(&self) -> PathBuf {
        self.dir.path().join("stimuli")
    }

    pub fn sessions(&self) -> PathBuf {
        self.dir.path().join("sessions")
    }

    pub fn router(&self) -> Router {
        let (state, quarantined) = build_state(ServiceConfig {
            stimuli_dir: self.stimuli(),
            sessions_dir: self.sessions(),
            weights: None,
        })
        .unwrap();
        assert!(quarantined.is_empty());
        router(state)
    }
}

pub async fn call(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Vec<u8>) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => builder
            .header("content-type", "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX)
        .await
        .unwrap();
    (status, bytes.to_vec())
}

pub async fn call_json(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or(Value::Null),
    )
}

pub fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../schemas")
        .join(format!("{name}.json"));
    let value: Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    jsonschema::validator_for(&value).unwrap()
}

pub fn assert_schema(name: &str, instance: &Value) {
    let v = schema(name);
    let errors: Vec<String> = v.iter_errors(instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{name}: {errors:?} in {instance}");
}

pub const CONDITION_LABELS: [&str; 6] =
    ["original", "reference", "anchor", "lstm", "nmf", "oracle"];

/// True when a payload mentions no condition label anywhere.
pub fn is_blind(payload: &str) -> bool {
    CONDITION_LABELS.iter().all(|l| !payload.contains(l))
}
