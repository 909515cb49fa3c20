// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token-by-token concept tracing with frozen probes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numkit::{mean, population_std};
use crate::probes::ProbeBank;
use crate::toymodel::{HeadId, InterventionHook, Sampler, TokenId, ToyTransformer};

/// Which heads a trace scores.
#[derive(Debug, Clone, PartialEq)]
pub enum Tracked {
    /// The bank's top-K heads; the ensemble score is their mean.
    TopK(usize),
    /// One head; the ensemble score is that head's score.
    Head(HeadId),
}

impl Tracked {
    pub fn heads(&self, bank: &ProbeBank) -> Result<Vec<HeadId>> {
        match self {
            Tracked::TopK(k) => Ok(bank.top_k(*k)?.to_vec()),
            Tracked::Head(h) => {
                let (l, hh, _) = bank.shape();
                if h.layer >= l || h.head >= hh {
                    return Err(Error::validation(format!("head {h} is not in the bank")));
                }
                Ok(vec![*h])
            }
        }
    }
}

/// Scores at one token.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    /// Index among the scored tokens.
    pub step: usize,
    /// Context position whose activations were read.
    pub position: usize,
    /// Index into `Trace::tokens` of the token the scores are attached to.
    pub token_index: usize,
    pub token: TokenId,
    /// One score per tracked head, in tracked order.
    pub head_scores: Vec<f64>,
    pub ensemble: f64,
}

/// A scored token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub issue: String,
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
    pub tracked: Vec<HeadId>,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn ensemble_scores(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.ensemble).collect()
    }
}

/// Fails unless the bank was fitted on heads shaped like the model's.
pub fn check_bank_matches_model(bank: &ProbeBank, model: &ToyTransformer) -> Result<()> {
    let c = model.config();
    if bank.shape() != (c.layers, c.heads, c.head_dim) {
        return Err(Error::validation(format!(
            "bank shape {:?} does not match model (layers, heads, head_dim) = {:?}",
            bank.shape(),
            (c.layers, c.heads, c.head_dim)
        )));
    }
    Ok(())
}

/// Scores one set of layer-major taps. When `hook` is given, each tracked
/// head is scored on its activation plus the hook's delta.
pub fn score_taps(
    bank: &ProbeBank,
    tracked: &[HeadId],
    taps: &[Vec<f64>],
    hook: Option<&InterventionHook>,
) -> Result<(Vec<f64>, f64)> {
    let (_, heads, _) = bank.shape();
    let mut scores = Vec::with_capacity(tracked.len());
    for h in tracked {
        let x = &taps[h.layer * heads + h.head];
        let probe = bank.probe(*h);
        let s = match hook.and_then(|hk| hk.get(*h)) {
            Some(delta) => {
                let eff: Vec<f64> = x.iter().zip(delta).map(|(a, b)| a + b).collect();
                probe.predict(&eff)?
            }
            None => probe.predict(x)?,
        };
        scores.push(s);
    }
    let ens = scores.iter().sum::<f64>() / scores.len() as f64;
    if !ens.is_finite() {
        return Err(Error::Numeric("trace produced a non-finite score".into()));
    }
    Ok((scores, ens))
}

/// Generates `steps` tokens and scores each at the position that produced it.
/// With `hook`, generation is steered and scores use effective activations.
#[allow(clippy::too_many_arguments)]
pub fn trace_with_hook(
    model: &ToyTransformer,
    bank: &ProbeBank,
    tracked: &Tracked,
    issue: &str,
    prompt: &[TokenId],
    steps: usize,
    sampler: Sampler,
    hook: Option<&InterventionHook>,
) -> Result<Trace> {
    check_bank_matches_model(bank, model)?;
    let heads = tracked.heads(bank)?;
    let generation = model.generate(prompt, steps, hook, sampler, None)?;
    let mut events = Vec::with_capacity(generation.steps.len());
    for (t, step) in generation.steps.iter().enumerate() {
        let (head_scores, ensemble) = score_taps(bank, &heads, &step.taps, hook)?;
        events.push(TraceEvent {
            step: t,
            position: prompt.len() + t - 1,
            token_index: prompt.len() + t,
            token: step.token,
            head_scores,
            ensemble,
        });
    }
    Ok(Trace {
        issue: issue.to_string(),
        tokens: generation.tokens,
        prompt_len: prompt.len(),
        tracked: heads,
        events,
    })
}

/// Unsteered trace of a generation.
pub fn trace(
    model: &ToyTransformer,
    bank: &ProbeBank,
    tracked: &Tracked,
    issue: &str,
    prompt: &[TokenId],
    steps: usize,
    sampler: Sampler,
) -> Result<Trace> {
    trace_with_hook(model, bank, tracked, issue, prompt, steps, sampler, None)
}

/// Teacher-forced trace: one event per position of a fixed sequence, each
/// attached to the token at that position.
pub fn trace_sequence(
    model: &ToyTransformer,
    bank: &ProbeBank,
    tracked: &Tracked,
    issue: &str,
    tokens: &[TokenId],
) -> Result<Trace> {
    check_bank_matches_model(bank, model)?;
    let heads = tracked.heads(bank)?;
    let out = model.forward(tokens, None)?;
    let events = (0..tokens.len())
        .map(|p| {
            let (head_scores, ensemble) = score_taps(bank, &heads, &out.taps_at(p), None)?;
            Ok(TraceEvent {
                step: p,
                position: p,
                token_index: p,
                token: tokens[p],
                head_scores,
                ensemble,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Trace {
        issue: issue.to_string(),
        tokens: tokens.to_vec(),
        prompt_len: 0,
        tracked: heads,
        events,
    })
}

// ---------------------------------------------------------------------------
// Summaries
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    /// Population convention.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Moments {
    fn of(v: &[f64]) -> Self {
        Self {
            count: v.len(),
            mean: mean(v),
            std: population_std(v),
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSummary {
    pub overall: Moments,
    pub per_issue: BTreeMap<String, Moments>,
}

/// Moments of ensemble scores over every event of every trace.
pub fn summarize(traces: &[Trace]) -> Result<TraceSummary> {
    let mut all = Vec::new();
    let mut by_issue: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for t in traces {
        let s = t.ensemble_scores();
        by_issue.entry(t.issue.clone()).or_default().extend(&s);
        all.extend(s);
    }
    if all.is_empty() {
        return Err(Error::validation(
            "summarize needs at least one trace event",
        ));
    }
    Ok(TraceSummary {
        overall: Moments::of(&all),
        per_issue: by_issue
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| (k, Moments::of(&v)))
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotateFormat {
    Ansi,
    Html,
}

impl std::str::FromStr for AnnotateFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ansi" => Ok(AnnotateFormat::Ansi),
            "html" => Ok(AnnotateFormat::Html),
            other => Err(Error::validation(format!(
                "unknown format {other:?} (ansi|html)"
            ))),
        }
    }
}

/// Blue at `lo`, white at the midpoint, red at `hi`, linear in between.
/// Scores outside the bounds are clamped.
pub fn score_color(score: f64, lo: f64, hi: f64) -> (u8, u8, u8) {
    let p = ((score - lo) / (hi - lo)).clamp(0.0, 1.0);
    let c = |x: f64| (255.0 * x).round() as u8;
    if p < 0.5 {
        let f = p / 0.5;
        (c(f), c(f), 255)
    } else {
        let g = (p - 0.5) / 0.5;
        (255, c(1.0 - g), c(1.0 - g))
    }
}

fn html_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// Renders a trace with each scored token colored by its ensemble score.
/// Unscored tokens (the prompt) are printed plain.
pub fn annotate(
    trace: &Trace,
    token_text: &dyn Fn(TokenId) -> String,
    bounds: (f64, f64),
    format: AnnotateFormat,
) -> Result<String> {
    let (lo, hi) = bounds;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::validation(
            "palette bounds must be finite with lo < hi",
        ));
    }
    let scored: BTreeMap<usize, f64> = trace
        .events
        .iter()
        .map(|e| (e.token_index, e.ensemble))
        .collect();
    let mut out = String::new();
    if format == AnnotateFormat::Html {
        out.push_str(
            "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>trace</title></head>\n",
        );
        out.push_str("<body style=\"font-family:monospace;white-space:pre-wrap\">\n");
    }
    for (i, &tok) in trace.tokens.iter().enumerate() {
        let text = token_text(tok);
        match (scored.get(&i), format) {
            (Some(&s), AnnotateFormat::Ansi) => {
                let (r, g, b) = score_color(s, lo, hi);
                let _ = write!(out, "\x1b[38;2;0;0;0;48;2;{r};{g};{b}m{text}\x1b[0m");
            }
            (Some(&s), AnnotateFormat::Html) => {
                let (r, g, b) = score_color(s, lo, hi);
                let _ = write!(
                    out,
                    "<span style=\"background-color:rgb({r},{g},{b})\" title=\"{s}\">{}</span>",
                    html_escape(&text)
                );
            }
            (None, AnnotateFormat::Ansi) => out.push_str(&text),
            (None, AnnotateFormat::Html) => out.push_str(&html_escape(&text)),
        }
    }
    if format == AnnotateFormat::Html {
        out.push_str("\n</body></html>\n");
    } else {
        out.push('\n');
    }
    Ok(out)
}

/// Default token rendering: `<id> `.
pub fn token_id_text(tok: TokenId) -> String {
    format!("{tok} ")
}

/// Delimited rows `issue,step,position,token,<head columns>,ensemble`.
/// Head columns are named `l{layer}h{head}` with 0-based indices.
pub fn traces_csv(traces: &[Trace]) -> Result<String> {
    let Some(first) = traces.first() else {
        return Ok("issue,step,position,token,ensemble\n".into());
    };
    if traces.iter().any(|t| t.tracked != first.tracked) {
        return Err(Error::validation("traces track different heads"));
    }
    let mut out = String::from("issue,step,position,token");
    for h in &first.tracked {
        let _ = write!(out, ",l{}h{}", h.layer, h.head);
    }
    out.push_str(",ensemble\n");
    for t in traces {
        for e in &t.events {
            let _ = write!(out, "{},{},{},{}", t.issue, e.step, e.position, e.token);
            for s in &e.head_scores {
                let _ = write!(out, ",{s}");
            }
            let _ = writeln!(out, ",{}", e.ensemble);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Prompt files
// ---------------------------------------------------------------------------

/// One prompt: an issue tag and its token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLine {
    pub issue: String,
    pub tokens: Vec<TokenId>,
}

/// Parses `issue<TAB>id id id` lines. Blank lines and `#` comments skipped.
pub fn parse_prompts(text: &str) -> Result<Vec<PromptLine>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (issue, ids) = line.split_once('\t').ok_or_else(|| {
            Error::Format(format!(
                "prompt line {}: expected issue<TAB>token ids",
                n + 1
            ))
        })?;
        let tokens = ids
            .split_whitespace()
            .map(|t| {
                t.parse::<TokenId>().map_err(|_| {
                    Error::Format(format!("prompt line {}: bad token id {t:?}", n + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if tokens.is_empty() {
            return Err(Error::Format(format!("prompt line {}: no tokens", n + 1)));
        }
        out.push(PromptLine {
            issue: issue.trim().to_string(),
            tokens,
        });
    }
    if out.is_empty() {
        return Err(Error::Format("prompt file has no prompts".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(score: f64) -> TraceEvent {
        TraceEvent {
            step: 0,
            position: 0,
            token_index: 0,
            token: 0,
            head_scores: vec![score],
            ensemble: score,
        }
    }

    fn tr(issue: &str, scores: &[f64]) -> Trace {
        Trace {
            issue: issue.into(),
            tokens: (0..scores.len() as u32).collect(),
            prompt_len: 0,
            tracked: vec![HeadId::new(0, 0)],
            events: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| TraceEvent {
                    step: i,
                    position: i,
                    token_index: i,
                    token: i as u32,
                    ..ev(s)
                })
                .collect(),
        }
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&[tr("a", &[0.3])]).unwrap();
        assert_eq!(s.overall.mean, 0.3);
        assert_eq!(s.overall.std, 0.0);
        let s = summarize(&[tr("a", &[-1.0, 1.0])]).unwrap();
        assert_eq!(s.overall.mean, 0.0);
        assert_eq!(s.overall.std, 1.0);
        assert!(summarize(&[]).is_err());
        assert!(summarize(&[tr("a", &[])]).is_err());
    }

    #[test]
    fn summary_per_issue_and_concat_mean() {
        let a = tr("x", &[0.1, 0.5, -0.2]);
        let b = tr("y", &[0.9, 0.4]);
        let s = summarize(&[a.clone(), b.clone()]).unwrap();
        let (sa, sb) = (summarize(&[a]).unwrap(), summarize(&[b]).unwrap());
        let weighted = (3.0 * sa.overall.mean + 2.0 * sb.overall.mean) / 5.0;
        assert!((s.overall.mean - weighted).abs() < 1e-15);
        assert_eq!(s.per_issue.len(), 2);
        assert_eq!(s.overall.min, -0.2);
        assert_eq!(s.overall.max, 0.9);
    }

    #[test]
    fn palette_endpoints_and_clamp() {
        assert_eq!(score_color(0.0, -1.0, 1.0), (255, 255, 255));
        assert_eq!(score_color(-1.0, -1.0, 1.0), (0, 0, 255));
        assert_eq!(score_color(1.0, -1.0, 1.0), (255, 0, 0));
        assert_eq!(score_color(-2.0, -1.0, 1.0), score_color(-1.0, -1.0, 1.0));
        assert_eq!(score_color(7.0, -1.0, 1.0), (255, 0, 0));
        assert_eq!(score_color(-0.5, -1.0, 1.0), (128, 128, 255));
    }

    #[test]
    fn annotate_is_pure_and_escapes() {
        let t = tr("a", &[-1.0, 0.0, 1.0]);
        let text = |tok: TokenId| {
            if tok == 1 {
                "<b>".to_string()
            } else {
                format!("t{tok}")
            }
        };
        let h1 = annotate(&t, &text, (-1.0, 1.0), AnnotateFormat::Html).unwrap();
        let h2 = annotate(&t, &text, (-1.0, 1.0), AnnotateFormat::Html).unwrap();
        assert_eq!(h1, h2);
        assert!(h1.contains("&lt;b&gt;"));
        assert!(h1.contains("rgb(0,0,255)"));
        assert!(h1.starts_with("<!DOCTYPE html>"));
        let a = annotate(&t, &text, (-1.0, 1.0), AnnotateFormat::Ansi).unwrap();
        assert!(a.contains("48;2;255;0;0m"));
        assert!(annotate(&t, &text, (1.0, -1.0), AnnotateFormat::Ansi).is_err());
    }

    #[test]
    fn prompt_parsing() {
        let p = parse_prompts("# c\nguns\t3 4 5\n\ntax\t7\n").unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].issue, "guns");
        assert_eq!(p[0].tokens, vec![3, 4, 5]);
        assert!(matches!(parse_prompts("guns 3 4"), Err(Error::Format(_))));
        assert!(matches!(parse_prompts("guns\tx"), Err(Error::Format(_))));
        assert!(parse_prompts("").is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let csv = traces_csv(&[tr("a", &[0.5, 0.25])]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "issue,step,position,token,l0h0,ensemble");
        assert_eq!(lines[2], "a,1,1,1,0.25,0.25");
    }
}
