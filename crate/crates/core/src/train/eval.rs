use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{generate_batch, ModelParams};
use crate::taskgen::Dataset;
use crate::vocab;

/// Prompts decoded together; bounds the K/V buffers of the batched decoder.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub prompt: String,
    pub target: String,
    pub generated: String,
    pub correct: bool,
    /// Everything but the final decision token matches.
    pub correct_excl_last: bool,
    pub last_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub full_seq_acc: f64,
    pub acc_excl_last: f64,
    pub last_token_acc: f64,
    pub outcomes: Vec<ExampleOutcome>,
}

/// Greedy generation of every target; all three accuracies come from the
/// same decoded outputs. An empty dataset scores zero.
pub fn evaluate(params: &ModelParams<f32>, dataset: &Dataset) -> Result<EvalResult> {
    let steps = dataset.layout().output_len();
    let mut outcomes = Vec::with_capacity(dataset.len());
    for chunk in dataset.examples.chunks(EVAL_CHUNK) {
        let prompts: Vec<Vec<u8>> = chunk.iter().map(|e| e.prompt_tokens()).collect();
        let outputs = generate_batch(params, &prompts, steps)?;
        for (example, full) in chunk.iter().zip(outputs) {
            let out = &full[full.len() - steps..];
            let target = vocab::encode(&example.target)?;
            let split = target.len().saturating_sub(1);
            outcomes.push(ExampleOutcome {
                prompt: example.prompt(),
                target: example.target.clone(),
                generated: vocab::decode(out)?,
                correct: out == target.as_slice(),
                correct_excl_last: out[..split] == target[..split],
                last_correct: out.last() == target.last(),
            });
        }
    }
    let frac = |f: fn(&ExampleOutcome) -> bool| {
        if outcomes.is_empty() {
            0.0
        } else {
            outcomes.iter().filter(|o| f(o)).count() as f64 / outcomes.len() as f64
        }
    };
    Ok(EvalResult {
        full_seq_acc: frac(|o| o.correct),
        acc_excl_last: frac(|o| o.correct_excl_last),
        last_token_acc: frac(|o| o.last_correct),
        outcomes,
    })
}
