//! Provider-agnostic model invocation with retries, deterministic
//! record/replay cassettes, and a usage ledger for cost and latency
//! accounting.

mod cassette;
mod ledger;
mod providers;

pub use cassette::{Cassette, CassetteMode};
pub use ledger::{
    ledger_report, CostRow, CostTable, LedgerStage, ModelPrice, PriceTable, UsageLedgerEntry,
};
pub use providers::{http_provider_from_env, ModelProvider, ProviderReply, StubProvider, TransportError};

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::Modality;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("cassette miss for request hash {0}")]
    CassetteMiss(String),
    #[error("budget of {budget} exhausted: {spent} already spent")]
    BudgetExceeded { budget: f64, spent: f64 },
    #[error("no provider registered for id {0:?}")]
    UnknownProvider(String),
    #[error("replay cassettes are read-only")]
    ReadOnlyCassette,
    #[error("cassette io: {0}")]
    CassetteIo(String),
}

/// One image attachment: media type plus raw bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub media_type: String,
    pub bytes: Vec<u8>,
}

/// A fully specified model call. Two requests with identical fields hash
/// identically; the hash keys cassette entries, and it covers image bytes
/// so changed scans invalidate recordings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub provider_id: String,
    pub model_id: String,
    pub prompt_text: String,
    #[serde(default)]
    pub image_payloads: Vec<ImagePayload>,
    #[serde(default)]
    pub decode_params: BTreeMap<String, String>,
}

impl ModelRequest {
    pub fn text(
        provider_id: impl Into<String>,
        model_id: impl Into<String>,
        prompt_text: impl Into<String>,
    ) -> Self {
        Self {
            provider_id: provider_id.into(),
            model_id: model_id.into(),
            prompt_text: prompt_text.into(),
            image_payloads: Vec::new(),
            decode_params: default_decode_params(),
        }
    }

    /// Stable content digest over every request field.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        let mut put = |bytes: &[u8]| {
            hasher.update((bytes.len() as u64).to_be_bytes());
            hasher.update(bytes);
        };
        put(self.provider_id.as_bytes());
        put(self.model_id.as_bytes());
        put(self.prompt_text.as_bytes());
        for image in &self.image_payloads {
            put(image.media_type.as_bytes());
            put(&image.bytes);
        }
        for (key, value) in &self.decode_params {
            put(key.as_bytes());
            put(value.as_bytes());
        }
        hex_digest(hasher)
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Decode parameters used unless a caller overrides them: temperature 0
/// for determinism and a bounded output length.
pub fn default_decode_params() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("temperature".to_string(), "0".to_string()),
        ("max_output".to_string(), "2048".to_string()),
    ])
}

/// Terminal state of one model call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishState {
    Complete,
    Truncated,
    Refused,
    TransportError,
}

/// The model's answer plus usage accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub raw_text: String,
    pub input_units: u64,
    pub output_units: u64,
    pub latency_seconds: f64,
    pub finish_state: FinishState,
}

/// Call-site metadata the gateway cannot derive from the request itself,
/// used to fill ledger entries.
#[derive(Debug, Clone)]
pub struct InvokeMeta {
    pub doc_id: String,
    pub modality: Modality,
    pub stage: LedgerStage,
    pub page_count: usize,
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    /// Attempts per call before giving up with a transport-error response.
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub backoff_cap: Duration,
    /// Upper bound on concurrent provider calls.
    pub max_inflight: usize,
    /// Abort with [`GatewayError::BudgetExceeded`] once accumulated cost
    /// reaches this bound. Checked before each paid call.
    pub budget: Option<f64>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_base: Duration::from_millis(200),
            backoff_cap: Duration::from_secs(2),
            max_inflight: 4,
            budget: None,
        }
    }
}

/// Counting semaphore bounding in-flight provider calls.
struct Inflight {
    permits: Mutex<usize>,
    released: Condvar,
}

impl Inflight {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            released: Condvar::new(),
        }
    }

    fn acquire(&self) -> InflightGuard<'_> {
        let mut permits = self.permits.lock().expect("inflight lock");
        while *permits == 0 {
            permits = self.released.wait(permits).expect("inflight wait");
        }
        *permits -= 1;
        InflightGuard { inner: self }
    }
}

struct InflightGuard<'a> {
    inner: &'a Inflight,
}

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        *self.inner.permits.lock().expect("inflight lock") += 1;
        self.inner.released.notify_one();
    }
}

/// The invocation front end. Safe for concurrent use: provider calls are
/// bounded by `max_inflight`, and cassette and ledger writes go through a
/// single writer lock each.
pub struct Gateway {
    providers: BTreeMap<String, Box<dyn ModelProvider>>,
    config: GatewayConfig,
    cassette: Mutex<Cassette>,
    ledger: Mutex<Vec<UsageLedgerEntry>>,
    prices: PriceTable,
    inflight: Inflight,
}

impl Gateway {
    pub fn new(cassette: Cassette, prices: PriceTable, config: GatewayConfig) -> Self {
        let mut providers: BTreeMap<String, Box<dyn ModelProvider>> = BTreeMap::new();
        providers.insert("stub".to_string(), Box::new(StubProvider));
        Self {
            providers,
            inflight: Inflight::new(config.max_inflight),
            config,
            cassette: Mutex::new(cassette),
            ledger: Mutex::new(Vec::new()),
            prices,
        }
    }

    pub fn register_provider(&mut self, id: impl Into<String>, provider: Box<dyn ModelProvider>) {
        self.providers.insert(id.into(), provider);
    }

    pub fn cassette_mode(&self) -> CassetteMode {
        self.cassette.lock().expect("cassette lock").mode()
    }

    /// Digest of the cassette contents, for artifact provenance.
    pub fn cassette_digest(&self) -> String {
        self.cassette.lock().expect("cassette lock").digest()
    }

    pub fn ledger_entries(&self) -> Vec<UsageLedgerEntry> {
        self.ledger.lock().expect("ledger lock").clone()
    }

    pub fn total_cost(&self) -> f64 {
        self.ledger
            .lock()
            .expect("ledger lock")
            .iter()
            .map(|e| e.cost)
            .sum()
    }

    /// Executes one model call according to the cassette mode.
    ///
    /// Replay serves the stored response byte-identically and never touches
    /// the network; the ledger gets an entry with the recorded usage priced
    /// by the current price table. Record serves duplicates from the
    /// cassette as zero-cost entries flagged `cached`, and otherwise calls
    /// the provider, retrying transport errors with capped exponential
    /// backoff before giving up with a `TransportError` response.
    pub fn invoke(
        &self,
        request: &ModelRequest,
        meta: &InvokeMeta,
    ) -> Result<ModelResponse, GatewayError> {
        let hash = request.hash();
        let mode = self.cassette_mode();
        match mode {
            CassetteMode::Replay => {
                let stored = {
                    let cassette = self.cassette.lock().expect("cassette lock");
                    cassette.lookup(&hash).cloned()
                };
                let response = stored.ok_or(GatewayError::CassetteMiss(hash))?;
                self.push_ledger(request, meta, &response, false);
                Ok(response)
            }
            CassetteMode::Record => {
                let stored = {
                    let cassette = self.cassette.lock().expect("cassette lock");
                    cassette.lookup(&hash).cloned()
                };
                if let Some(response) = stored {
                    self.push_ledger(request, meta, &response, true);
                    return Ok(response);
                }
                let response = self.call_provider(request)?;
                {
                    let mut cassette = self.cassette.lock().expect("cassette lock");
                    cassette.insert(&hash, &response)?;
                }
                self.push_ledger(request, meta, &response, false);
                Ok(response)
            }
            CassetteMode::Passthrough => {
                let response = self.call_provider(request)?;
                self.push_ledger(request, meta, &response, false);
                Ok(response)
            }
        }
    }

    fn push_ledger(
        &self,
        request: &ModelRequest,
        meta: &InvokeMeta,
        response: &ModelResponse,
        cached: bool,
    ) {
        let cost = if cached {
            0.0
        } else {
            self.prices
                .cost(&request.model_id, response.input_units, response.output_units)
        };
        let entry = UsageLedgerEntry {
            doc_id: meta.doc_id.clone(),
            model_id: request.model_id.clone(),
            modality: meta.modality,
            stage: meta.stage,
            page_count: meta.page_count,
            input_units: response.input_units,
            output_units: response.output_units,
            latency_seconds: if cached { 0.0 } else { response.latency_seconds },
            cost,
            cached,
        };
        self.ledger.lock().expect("ledger lock").push(entry);
    }

    fn call_provider(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        if let Some(budget) = self.config.budget {
            let spent = self.total_cost();
            if spent >= budget {
                return Err(GatewayError::BudgetExceeded { budget, spent });
            }
        }
        let provider = self
            .providers
            .get(&request.provider_id)
            .ok_or_else(|| GatewayError::UnknownProvider(request.provider_id.clone()))?;

        let _permit = self.inflight.acquire();
        let started = Instant::now();
        for attempt in 0..self.config.max_attempts {
            let attempt_started = Instant::now();
            match provider.call(request) {
                Ok(reply) => {
                    return Ok(ModelResponse {
                        raw_text: reply.raw_text,
                        input_units: reply.input_units,
                        output_units: reply.output_units,
                        latency_seconds: attempt_started.elapsed().as_secs_f64(),
                        finish_state: reply.finish_state,
                    });
                }
                Err(_transport) => {
                    if attempt + 1 < self.config.max_attempts {
                        let backoff = self
                            .config
                            .backoff_base
                            .saturating_mul(1 << attempt.min(16))
                            .min(self.config.backoff_cap);
                        std::thread::sleep(backoff);
                    }
                }
            }
        }
        Ok(ModelResponse {
            raw_text: String::new(),
            input_units: 0,
            output_units: 0,
            latency_seconds: started.elapsed().as_secs_f64(),
            finish_state: FinishState::TransportError,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    struct CountingProvider {
        calls: Arc<AtomicUsize>,
        fail_first: usize,
    }

    impl ModelProvider for CountingProvider {
        fn call(&self, request: &ModelRequest) -> Result<ProviderReply, TransportError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                return Err(TransportError("synthetic outage".into()));
            }
            Ok(ProviderReply {
                raw_text: format!("reply to {} bytes", request.prompt_text.len()),
                input_units: 100,
                output_units: 10,
                finish_state: FinishState::Complete,
            })
        }
    }

    fn test_config() -> GatewayConfig {
        GatewayConfig {
            backoff_base: Duration::ZERO,
            backoff_cap: Duration::ZERO,
            ..GatewayConfig::default()
        }
    }

    fn meta() -> InvokeMeta {
        InvokeMeta {
            doc_id: "doc-0".into(),
            modality: Modality::OcrOnly,
            stage: LedgerStage::Extract,
            page_count: 1,
        }
    }

    fn priced_table() -> PriceTable {
        let mut prices = PriceTable::empty();
        prices.set(
            "m1",
            ModelPrice {
                input_per_unit: 0.001,
                output_per_unit: 0.002,
            },
        );
        prices
    }

    fn counting_gateway(mode: CassetteMode, fail_first: usize) -> (Gateway, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        let mut gateway = Gateway::new(Cassette::in_memory(mode), priced_table(), test_config());
        gateway.register_provider(
            "test",
            Box::new(CountingProvider {
                calls: calls.clone(),
                fail_first,
            }),
        );
        (gateway, calls)
    }

    fn request(prompt: &str) -> ModelRequest {
        ModelRequest::text("test", "m1", prompt)
    }

    #[test]
    fn identical_requests_hash_identically() {
        assert_eq!(request("hello").hash(), request("hello").hash());
        assert_ne!(request("hello").hash(), request("world").hash());
    }

    #[test]
    fn image_bytes_participate_in_hash() {
        let mut a = request("hello");
        let mut b = request("hello");
        a.image_payloads.push(ImagePayload {
            media_type: "image/png".into(),
            bytes: vec![1, 2, 3],
        });
        b.image_payloads.push(ImagePayload {
            media_type: "image/png".into(),
            bytes: vec![1, 2, 4],
        });
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn replay_hit_returns_stored_response_without_network() {
        let (gateway, calls) = counting_gateway(CassetteMode::Record, 0);
        let req = request("hi");
        let recorded = gateway.invoke(&req, &meta()).unwrap();

        // New gateway in replay mode, same cassette contents.
        let mut cassette = Cassette::in_memory(CassetteMode::Record);
        cassette.insert(&req.hash(), &recorded).unwrap();
        let replayed = Cassette::replay_of(cassette);
        let (mut replay_gateway, replay_calls) = {
            let calls = Arc::new(AtomicUsize::new(0));
            let g = Gateway::new(replayed, priced_table(), test_config());
            (g, calls)
        };
        replay_gateway.register_provider(
            "test",
            Box::new(CountingProvider {
                calls: replay_calls.clone(),
                fail_first: 0,
            }),
        );
        let response = replay_gateway.invoke(&req, &meta()).unwrap();
        assert_eq!(response, recorded);
        assert_eq!(replay_calls.load(Ordering::SeqCst), 0);
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn replay_miss_is_an_error() {
        let gateway = Gateway::new(
            Cassette::in_memory(CassetteMode::Replay),
            PriceTable::empty(),
            test_config(),
        );
        let err = gateway.invoke(&request("unknown"), &meta()).unwrap_err();
        assert!(matches!(err, GatewayError::CassetteMiss(_)));
    }

    #[test]
    fn record_serves_duplicates_from_cassette() {
        let (gateway, calls) = counting_gateway(CassetteMode::Record, 0);
        let req = request("hi");
        let first = gateway.invoke(&req, &meta()).unwrap();
        let second = gateway.invoke(&req, &meta()).unwrap();
        assert_eq!(first, second);
        assert_eq!(calls.load(Ordering::SeqCst), 1, "second call must be served from cassette");

        let entries = gateway.ledger_entries();
        assert_eq!(entries.len(), 2);
        let paid: Vec<_> = entries.iter().filter(|e| !e.cached).collect();
        assert_eq!(paid.len(), 1, "exactly one paid entry for one provider call");
        assert!(entries[1].cached);
        assert_eq!(entries[1].cost, 0.0);
        // Total cost equals the single paid call: 100*0.001 + 10*0.002.
        assert!((gateway.total_cost() - 0.12).abs() < 1e-12);
    }

    #[test]
    fn transport_errors_retry_then_succeed() {
        let (gateway, calls) = counting_gateway(CassetteMode::Passthrough, 2);
        let response = gateway.invoke(&request("hi"), &meta()).unwrap();
        assert_eq!(response.finish_state, FinishState::Complete);
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausted_retries_return_transport_error_state() {
        let (gateway, calls) = counting_gateway(CassetteMode::Passthrough, 99);
        let response = gateway.invoke(&request("hi"), &meta()).unwrap();
        assert_eq!(response.finish_state, FinishState::TransportError);
        assert_eq!(calls.load(Ordering::SeqCst), 3, "max three attempts");
    }

    #[test]
    fn budget_blocks_further_paid_calls() {
        let calls = Arc::new(AtomicUsize::new(0));
        let mut gateway = Gateway::new(
            Cassette::in_memory(CassetteMode::Passthrough),
            priced_table(),
            GatewayConfig {
                budget: Some(0.1),
                ..test_config()
            },
        );
        gateway.register_provider(
            "test",
            Box::new(CountingProvider {
                calls: calls.clone(),
                fail_first: 0,
            }),
        );
        gateway.invoke(&request("first"), &meta()).unwrap();
        let err = gateway.invoke(&request("second"), &meta()).unwrap_err();
        assert!(matches!(err, GatewayError::BudgetExceeded { .. }));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn unknown_provider_is_an_error() {
        let gateway = Gateway::new(
            Cassette::in_memory(CassetteMode::Passthrough),
            PriceTable::empty(),
            test_config(),
        );
        let req = ModelRequest::text("nope", "m", "p");
        assert!(matches!(
            gateway.invoke(&req, &meta()),
            Err(GatewayError::UnknownProvider(_))
        ));
    }
}
