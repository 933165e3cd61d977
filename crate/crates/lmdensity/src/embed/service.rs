//! HTTP client for an external embedding service.
//!
//! Protocol: POST `{"texts": [...]}` to the endpoint, which answers
//! `{"vectors": [[f32; dim], ...]}` in input order. Batches are dispatched
//! with bounded in-flight concurrency and reassembled in input order.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::EmbedderSpec;

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

pub(super) fn embed_via_service(texts: &[String], spec: &EmbedderSpec) -> Result<Vec<Vec<f32>>> {
    let endpoint = spec
        .endpoint
        .as_deref()
        .ok_or_else(|| Error::InvalidParameter("external-service embedder requires an endpoint".into()))?;
    if texts.is_empty() {
        return Ok(Vec::new());
    }

    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_secs(spec.timeout_secs))
        .build();

    let batches: Vec<&[String]> = texts.chunks(spec.batch_size).collect();
    let slots: Vec<Mutex<Option<std::result::Result<Vec<Vec<f32>>, String>>>> =
        (0..batches.len()).map(|_| Mutex::new(None)).collect();
    let cursor = AtomicUsize::new(0);
    let workers = spec.max_in_flight.max(1).min(batches.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let b = cursor.fetch_add(1, Ordering::Relaxed);
                if b >= batches.len() {
                    break;
                }
                let outcome = fetch_batch(&agent, endpoint, batches[b], spec);
                *slots[b].lock().unwrap() = Some(outcome);
            });
        }
    });

    let mut rows = Vec::with_capacity(texts.len());
    let mut failures = Vec::new();
    for (b, slot) in slots.into_iter().enumerate() {
        let start = b * spec.batch_size;
        match slot.into_inner().unwrap().expect("batch slot filled") {
            Ok(vectors) => rows.extend(vectors),
            Err(msg) => {
                let end = (start + batches[b].len()).saturating_sub(1);
                failures.push(format!("texts {start}..={end}: {msg}"));
            }
        }
    }
    if !failures.is_empty() {
        return Err(Error::Service(format!(
            "{} batch(es) failed after {} retries: {}",
            failures.len(),
            spec.max_retries,
            failures.join("; ")
        )));
    }
    Ok(rows)
}

fn fetch_batch(
    agent: &ureq::Agent,
    endpoint: &str,
    batch: &[String],
    spec: &EmbedderSpec,
) -> std::result::Result<Vec<Vec<f32>>, String> {
    let mut last_err = String::new();
    for _attempt in 0..=spec.max_retries {
        match agent.post(endpoint).send_json(EmbedRequest { texts: batch }) {
            Ok(resp) => match resp.into_json::<EmbedResponse>() {
                Ok(body) => {
                    if body.vectors.len() != batch.len() {
                        return Err(format!(
                            "service returned {} vectors for {} texts",
                            body.vectors.len(),
                            batch.len()
                        ));
                    }
                    if let Some(v) = body.vectors.iter().find(|v| v.len() != spec.dim) {
                        return Err(format!(
                            "service returned dim {} vector, expected {}",
                            v.len(),
                            spec.dim
                        ));
                    }
                    return Ok(body.vectors);
                }
                Err(e) => last_err = format!("bad response body: {e}"),
            },
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(last_err)
}
