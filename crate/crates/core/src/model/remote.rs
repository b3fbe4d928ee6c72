use std::sync::Mutex;
use std::time::Duration;

use super::wire::{densify, NextDistRequest, NextDistResponse, NEXT_DIST_PATH};
use super::{check_context, DenseDistribution, ModelError, TargetModel, DEFAULT_TEMPERATURE};
use crate::TokenId;

#[derive(Clone, Debug)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    pub endpoint: String,
    pub temperature: f64,
    /// Expected vocabulary size; probed from the server when `None`.
    pub vocab_size: Option<usize>,
    /// Retries after the first failed attempt on transport errors.
    pub max_retries: u32,
    pub backoff: Duration,
    pub timeout: Duration,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            temperature: DEFAULT_TEMPERATURE,
            vocab_size: None,
            max_retries: 3,
            backoff: Duration::from_millis(50),
            timeout: Duration::from_secs(10),
        }
    }
}

/// Client for a remote logit server speaking the [`super::wire`] protocol.
///
/// Requests on one client are serialized; use one client per session for
/// parallel decoding.
pub struct RemoteModel {
    config: RemoteConfig,
    vocab_size: usize,
    url: String,
    client: Mutex<reqwest::blocking::Client>,
}

impl RemoteModel {
    pub fn connect(config: RemoteConfig) -> Result<Self, ModelError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ModelError::Transport { attempts: 0, message: e.to_string() })?;
        let url = format!("{}{}", config.endpoint.trim_end_matches('/'), NEXT_DIST_PATH);
        let mut model = Self { vocab_size: config.vocab_size.unwrap_or(0), config, url, client: Mutex::new(client) };
        if model.vocab_size == 0 {
            model.vocab_size = model.request(&[0])?.vocab_size;
        }
        Ok(model)
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn request(&self, context: &[TokenId]) -> Result<NextDistResponse, ModelError> {
        let body = NextDistRequest { context: context.to_vec(), temperature: self.config.temperature };
        let client = self.client.lock().unwrap_or_else(|e| e.into_inner());
        let mut attempts = 0;
        loop {
            attempts += 1;
            match client.post(&self.url).json(&body).send() {
                Ok(resp) if resp.status().is_success() => {
                    let text = resp
                        .text()
                        .map_err(|e| ModelError::Transport { attempts, message: e.to_string() })?;
                    return serde_json::from_str(&text)
                        .map_err(|e| ModelError::Protocol(format!("malformed response: {e}")));
                }
                Ok(resp) if resp.status().is_client_error() => {
                    return Err(ModelError::Protocol(format!("server rejected request: {}", resp.status())));
                }
                Ok(resp) if attempts > self.config.max_retries => {
                    return Err(ModelError::Transport { attempts, message: format!("status {}", resp.status()) });
                }
                Err(e) if attempts > self.config.max_retries => {
                    return Err(ModelError::Transport { attempts, message: e.to_string() });
                }
                _ => std::thread::sleep(self.config.backoff * attempts),
            }
        }
    }
}

impl Clone for RemoteModel {
    /// The clone gets its own request lock, so clones can be used by
    /// concurrent sessions.
    fn clone(&self) -> Self {
        let client = self.client.lock().unwrap_or_else(|e| e.into_inner()).clone();
        Self { config: self.config.clone(), vocab_size: self.vocab_size, url: self.url.clone(), client: Mutex::new(client) }
    }
}

impl TargetModel for RemoteModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<DenseDistribution, ModelError> {
        check_context(context, self.vocab_size)?;
        densify(&self.request(context)?, self.vocab_size)
    }
}
