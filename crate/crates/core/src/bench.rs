//! Benchmark runs over a prompt set and the tables derived from them.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::drafting::{Drafter, HeadDrafter};
use crate::engine::{compute_alpha, decode, CycleMetrics, DecodeConfig, Method};
use crate::error::{bail, Result};
use crate::model::{DraftHead, TargetModel};
use crate::numerics::Rng;
use crate::verification::SamplingParams;

/// One benchmarked configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    pub name: String,
    pub method: Method,
    /// Index into the drafter list; unused for vanilla decoding.
    pub drafter: Option<usize>,
    pub decode: DecodeConfig,
}

/// A line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Cycle {
        case: String,
        temperature: f64,
        prompt: usize,
        #[serde(flatten)]
        metrics: CycleMetrics,
    },
    Run {
        case: String,
        method: Method,
        temperature: f64,
        prompt: usize,
        new_tokens: usize,
        cycles: usize,
        total_secs: f64,
    },
}

/// Aggregate of one case at one temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case: String,
    pub method: Method,
    pub temperature: f64,
    pub prompts: usize,
    pub new_tokens: usize,
    pub cycles: usize,
    pub tau: f64,
    pub alpha: Vec<Option<f64>>,
    pub tokens_per_sec: f64,
    pub speedup: Option<f64>,
}

/// Per-prompt sampling seed shared by every case, so cases see the same
/// random stream on the same prompt.
pub fn prompt_seed(seed: u64, temperature_index: usize, prompt: usize) -> u64 {
    Rng::derive(seed, ((temperature_index as u64) << 32) | prompt as u64).next_u64()
}

/// Runs every case on every prompt at every temperature. Within a prompt
/// the case order rotates, so slow drift in machine speed is spread over
/// all cases.
pub fn run_bench(
    target: &TargetModel<f32>,
    drafters: &[&DraftHead<f32>],
    cases: &[BenchCase],
    prompts: &[Vec<u32>],
    temperatures: &[f64],
    seed: u64,
    mut sink: impl FnMut(&Record) -> Result<()>,
) -> Result<Vec<Record>> {
    if cases.is_empty() || prompts.is_empty() || temperatures.is_empty() {
        bail!(Config, "benchmark needs at least one case, prompt and temperature");
    }
    for c in cases {
        if c.method != Method::Vanilla && c.drafter.is_none_or(|d| d >= drafters.len()) {
            bail!(Config, "case {:?} names no valid drafter", c.name);
        }
    }
    let mut records = Vec::new();
    for (ti, &temperature) in temperatures.iter().enumerate() {
        for (pi, prompt) in prompts.iter().enumerate() {
            let params = SamplingParams { temperature, seed: prompt_seed(seed, ti, pi), ..SamplingParams::default() };
            for k in 0..cases.len() {
                let case = &cases[(pi + k) % cases.len()];
                let cfg = DecodeConfig { method: case.method, ..case.decode.clone() };
                let mut head_drafter = case.drafter.filter(|_| case.method != Method::Vanilla).map(|d| HeadDrafter::new(drafters[d]));
                let dr = head_drafter.as_mut().map(|d| d as &mut dyn Drafter<f32>);
                let out = decode(prompt, target, dr, &cfg, &params)?;
                let mut batch = Vec::with_capacity(out.cycles.len() + 1);
                for m in out.cycles {
                    batch.push(Record::Cycle { case: case.name.clone(), temperature, prompt: pi, metrics: m });
                }
                batch.push(Record::Run {
                    case: case.name.clone(),
                    method: case.method,
                    temperature,
                    prompt: pi,
                    new_tokens: out.report.new_tokens,
                    cycles: out.report.cycles,
                    total_secs: out.report.total_secs,
                });
                for r in &batch {
                    sink(r)?;
                }
                records.extend(batch);
            }
        }
        log::info!("benchmark: temperature {temperature} done");
    }
    Ok(records)
}

/// Writes records as JSON lines.
pub fn write_jsonl(records: &[Record], mut w: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(text: &str) -> Result<Vec<Record>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Per-case aggregates computed from records alone. `max_step` bounds
/// the acceptance-rate table. Speedup is relative to the vanilla case at
/// the same temperature, when there is one.
pub fn summarize(records: &[Record], max_step: usize) -> Vec<CaseSummary> {
    #[derive(Default)]
    struct Acc {
        method: Option<Method>,
        prompts: usize,
        new_tokens: usize,
        secs: f64,
        cycles: Vec<CycleMetrics>,
        order: usize,
    }
    let mut accs: BTreeMap<(u64, String), Acc> = BTreeMap::new();
    let mut next = 0;
    for r in records {
        let (case, t) = match r {
            Record::Cycle { case, temperature, .. } | Record::Run { case, temperature, .. } => (case, temperature),
        };
        let acc = accs.entry((t.to_bits(), case.clone())).or_insert_with(|| {
            next += 1;
            Acc { order: next, ..Acc::default() }
        });
        match r {
            Record::Cycle { metrics, .. } => acc.cycles.push(metrics.clone()),
            Record::Run { method, new_tokens, total_secs, .. } => {
                acc.method = Some(*method);
                acc.prompts += 1;
                acc.new_tokens += *new_tokens;
                acc.secs += total_secs;
            }
        }
    }
    let mut out: Vec<(usize, CaseSummary)> = accs
        .iter()
        .map(|((t, case), a)| {
            let gen: usize = a.cycles.iter().map(|c| c.tokens_generated).sum();
            let summary = CaseSummary {
                case: case.clone(),
                method: a.method.unwrap_or_default(),
                temperature: f64::from_bits(*t),
                prompts: a.prompts,
                new_tokens: a.new_tokens,
                cycles: a.cycles.len(),
                tau: if a.cycles.is_empty() { 0.0 } else { gen as f64 / a.cycles.len() as f64 },
                alpha: if a.method == Some(Method::Vanilla) { Vec::new() } else { compute_alpha(&a.cycles, max_step) },
                tokens_per_sec: if a.secs > 0.0 { a.new_tokens as f64 / a.secs } else { 0.0 },
                speedup: None,
            };
            (a.order, summary)
        })
        .collect();
    out.sort_by_key(|(o, _)| *o);
    let mut out: Vec<CaseSummary> = out.into_iter().map(|(_, s)| s).collect();
    let vanilla: BTreeMap<u64, f64> = out
        .iter()
        .filter(|s| s.method == Method::Vanilla)
        .map(|s| (s.temperature.to_bits(), s.tokens_per_sec))
        .collect();
    for s in &mut out {
        if let Some(&v) = vanilla.get(&s.temperature.to_bits()) {
            if v > 0.0 {
                s.speedup = Some(s.tokens_per_sec / v);
            }
        }
    }
    out
}

/// Markdown table of summaries.
pub fn format_table(summaries: &[CaseSummary]) -> String {
    let steps = summaries.iter().map(|s| s.alpha.len()).max().unwrap_or(0);
    let mut s = String::from("| case | method | T | tau | tok/s | speedup |");
    for i in 1..=steps {
        s.push_str(&format!(" a{i} |"));
    }
    s.push_str("\n|---|---|---|---|---|---|");
    s.push_str(&"---|".repeat(steps));
    s.push('\n');
    for r in summaries {
        s.push_str(&format!(
            "| {} | {} | {} | {:.3} | {:.1} | {} |",
            r.case,
            r.method.name(),
            r.temperature,
            r.tau,
            r.tokens_per_sec,
            r.speedup.map_or("-".into(), |x| format!("{x:.2}x"))
        ));
        for i in 0..steps {
            match r.alpha.get(i).copied().flatten() {
                Some(a) => s.push_str(&format!(" {a:.3} |")),
                None => s.push_str(" - |"),
            }
        }
        s.push('\n');
    }
    s
}

/// `metrics.jsonl` text with every wall-time field removed.
pub fn strip_wall_times(jsonl: &str) -> Result<String> {
    let mut out = String::new();
    for line in jsonl.lines().filter(|l| !l.trim().is_empty()) {
        let mut v: serde_json::Value = serde_json::from_str(line)?;
        if let Some(obj) = v.as_object_mut() {
            obj.retain(|k, _| !k.ends_with("_secs"));
        }
        out.push_str(&v.to_string());
        out.push('\n');
    }
    Ok(out)
}
