// SPDX-License-Identifier: MIT OR Apache-2.0

//! One function per subcommand. Indices are 1-based on input and output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use headprobe::dataset::{read_label_table, transform_labels, LabelTransform, ProbeDataset};
use headprobe::demo::{build_demo, DemoConfig};
use headprobe::monitor::{
    annotate, parse_prompts, summarize, token_id_text, trace, traces_csv, AnnotateFormat,
    PromptLine, Trace, TraceSummary, Tracked,
};
use headprobe::probes::{
    default_k_grid, ensemble_curve, fit_bank, lambda_sweep, robustness_suite, transfer_eval,
    EvalReport, FitOptions, LeakageMode, ProbeBank, DEFAULT_K, DEFAULT_LAMBDA, LAMBDA_GRID,
};
use headprobe::steering::{
    alpha_k_sweep, build_plan, steer_generate, LayerFilter, PlanOptions, SweepConfig,
};
use headprobe::toymodel::{HeadId, Sampler, TokenId, ToyTransformer};
use headprobe::{traceio, Error, Result};

use crate::manifest::Manifest;
use crate::{
    DemoArgs, EnsembleArgs, FileConfig, FitArgs, FormatArg, GenArgs, ModeArg, SteerArgs, SweepArgs,
    TraceArgs, TransferArgs, TransformArg,
};

const DEFAULT_STEPS: usize = 16;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Parses a 1-based `layer,head` pair.
pub fn parse_head(s: &str) -> Result<HeadId> {
    let bad = || Error::Validation(format!("--head expects 1-based `layer,head`, got {s:?}"));
    let (l, h) = s.split_once(',').ok_or_else(bad)?;
    let l: usize = l.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if l == 0 || h == 0 {
        return Err(bad());
    }
    Ok(HeadId::new(l - 1, h - 1))
}

/// Parses a 1-based inclusive `lo-hi` (or single `n`) layer range.
pub fn parse_layers(s: Option<&str>) -> Result<LayerFilter> {
    let Some(s) = s else {
        return Ok(LayerFilter::All);
    };
    if s == "all" {
        return Ok(LayerFilter::All);
    }
    let bad = || Error::Validation(format!("--layers expects 1-based `lo-hi`, got {s:?}"));
    let (lo, hi) = s.split_once('-').unwrap_or((s, s));
    let lo: usize = lo.trim().parse().map_err(|_| bad())?;
    let hi: usize = hi.trim().parse().map_err(|_| bad())?;
    if lo == 0 || hi == 0 || lo > hi {
        return Err(bad());
    }
    Ok(LayerFilter::Range {
        lo: lo - 1,
        hi: hi - 1,
    })
}

fn layers_display(f: LayerFilter) -> String {
    match f {
        LayerFilter::All => "all".into(),
        LayerFilter::Range { lo, hi } => format!("{}-{}", lo + 1, hi + 1),
    }
}

/// Loads a dump, taking labels from `labels` when given.
fn load_dataset(
    dump: &Path,
    labels: Option<&PathBuf>,
    manifest: &mut Manifest,
) -> Result<ProbeDataset> {
    manifest.input(dump);
    let file = traceio::read_dump_file(dump)?;
    match labels {
        None => file.into_dataset(None),
        Some(path) => {
            manifest.input(path);
            let rows = read_label_table(path)?;
            let n = file.activations.dims().0;
            file.into_dataset(Some(vec![0.0; n]))?.attach_labels(&rows)
        }
    }
}

fn load_bank(path: &Path, manifest: &mut Manifest) -> Result<ProbeBank> {
    manifest.input(path);
    traceio::load_bank(path)
}

fn load_model(path: &Path, manifest: &mut Manifest) -> Result<ToyTransformer> {
    manifest.input(path);
    traceio::load_model(path)
}

fn load_prompts(path: &Path, manifest: &mut Manifest) -> Result<Vec<PromptLine>> {
    manifest.input(path);
    let prompts = parse_prompts(&read_text(path)?)?;
    if prompts.is_empty() {
        return Err(Error::Validation(format!(
            "{} holds no prompts",
            path.display()
        )));
    }
    Ok(prompts)
}

/// Resolves K: explicit values must fit the bank, the default is clipped.
fn resolve_k(
    flag: Option<usize>,
    config: &FileConfig,
    bank: &ProbeBank,
    manifest: &mut Manifest,
) -> Result<usize> {
    let total = bank.num_heads();
    match flag.or(config.k) {
        Some(k) if k == 0 || k > total => {
            Err(Error::Validation(format!("K = {k} outside [1, {total}]")))
        }
        Some(k) => Ok(k),
        None => {
            let k = DEFAULT_K.min(total);
            if k < DEFAULT_K {
                manifest.note(format!("default K {DEFAULT_K} clipped to {k} heads"));
            }
            Ok(k)
        }
    }
}

fn sampler(temperature: Option<f64>, seed: u64) -> Result<Sampler> {
    match temperature {
        None => Ok(Sampler::Greedy),
        Some(t) if t.is_finite() && t > 0.0 => Ok(Sampler::Temperature {
            temperature: t,
            seed,
        }),
        Some(t) => Err(Error::Validation(format!(
            "temperature must be > 0, got {t}"
        ))),
    }
}

fn note_fingerprint(bank: &ProbeBank, ds: &ProbeDataset, m: &mut Manifest) {
    if bank.dataset_fingerprint != ds.fingerprint() {
        m.note(format!(
            "bank was fitted on a different dataset ({})",
            bank.dataset_fingerprint
        ));
    }
}

// ---------------------------------------------------------------------------

pub fn demo(args: &DemoArgs, jobs: usize) -> Result<()> {
    if !args.gain.is_finite() {
        return Err(Error::Validation("--gain must be finite".into()));
    }
    let cfg = DemoConfig {
        seed: args.seed,
        n: args.n,
        gain: args.gain,
        ..DemoConfig::default()
    };
    let demo = build_demo(&cfg)?;
    create_dir(&args.out)?;
    let resolved = json!({
        "n": cfg.n, "layers": cfg.layers, "heads": cfg.heads, "dim": cfg.dim,
        "model_dim": cfg.model_dim, "vocab": cfg.vocab,
        "planted_head": demo.config.planted_head.to_string(),
        "gain": cfg.gain, "noise": cfg.noise, "background_noise": cfg.background_noise,
        "readout_gain": cfg.readout_gain,
    });
    let mut m = Manifest::new("demo", resolved, json!({ "seed": cfg.seed }), jobs);

    m.write(
        &args.out,
        "model.aprm",
        &traceio::encode_model(&demo.model)?,
    )?;
    m.write(
        &args.out,
        "fixture.aprb",
        &traceio::encode_dump(&demo.dataset)?,
    )?;
    let mut prompts = String::from("# issue<TAB>token ids\n");
    for p in &demo.prompts {
        let ids: Vec<String> = p.tokens.iter().map(u32::to_string).collect();
        prompts.push_str(&format!("{}\t{}\n", p.issue, ids.join(" ")));
    }
    m.write(&args.out, "prompts.txt", prompts.as_bytes())?;
    let readme = format!(
        "Demo fixture (seed {seed}).\n\
         \n\
         model.aprm    toy transformer, {l} layers x {h} heads, head dim {d}, vocab {v}\n\
         fixture.aprb  {n} labelled samples; the concept is planted in head {planted} (1-based) with gain {gain}\n\
         prompts.txt   prompts for trace, steer and sweep\n\
         \n\
         Try:\n\
         \x20 headprobe fit --dump fixture.aprb --out fit\n\
         \x20 headprobe trace --model model.aprm --bank fit/bank.json --prompts prompts.txt --out trace\n\
         \x20 headprobe sweep --model model.aprm --bank fit/bank.json --prompts prompts.txt --out sweep\n",
        seed = cfg.seed,
        l = cfg.layers,
        h = cfg.heads,
        d = cfg.dim,
        v = cfg.vocab,
        n = cfg.n,
        planted = demo.config.planted_head,
        gain = cfg.gain,
    );
    m.write(&args.out, "README.txt", readme.as_bytes())?;
    m.finish(&args.out)?;
    println!(
        "wrote demo fixture to {} (planted head {})",
        args.out.display(),
        demo.config.planted_head
    );
    Ok(())
}

pub fn fit(args: &FitArgs, config: &FileConfig, jobs: usize) -> Result<()> {
    let lambda = args.lambda.or(config.lambda).unwrap_or(DEFAULT_LAMBDA);
    let fold_seed = args.fold_seed.or(config.fold_seed).unwrap_or(0);
    let resolved = json!({
        "lambda": lambda,
        "transform": args.transform,
        "lambda_sweep": args.lambda_sweep,
        "robustness": args.robustness,
    });
    let seeds = json!({ "fold_seed": fold_seed, "permute_seed": args.permute_seed });
    let mut m = Manifest::new("fit", resolved, seeds, jobs);

    let mut ds = load_dataset(&args.dump, args.labels.as_ref(), &mut m)?;
    let transform = match args.transform {
        TransformArg::None => None,
        TransformArg::Permute => Some(LabelTransform::Permute {
            seed: args.permute_seed,
        }),
        TransformArg::Cubic => Some(LabelTransform::Cubic),
        TransformArg::Sin10 => Some(LabelTransform::Sin10),
    };
    if let Some(t) = &transform {
        ds = transform_labels(&ds, t)?;
        if matches!(t, LabelTransform::Permute { .. }) {
            let note = "labels permuted: this bank is a null baseline, not a concept probe";
            m.note(note);
            eprintln!("note: {note}");
        } else {
            m.note(format!("labels transformed with {}", t.name()));
        }
    }
    create_dir(&args.out)?;
    let opts = FitOptions { lambda, fold_seed };
    let bank = fit_bank(&ds, &opts)?;
    for w in &bank.warnings {
        m.note(w.clone());
    }
    m.write(
        &args.out,
        "bank.json",
        traceio::encode_bank(&bank)?.as_bytes(),
    )?;
    let report = EvalReport::from_bank(&bank, 10);
    m.write(
        &args.out,
        "heatmap_spearman.csv",
        EvalReport::heatmap_csv(&report.spearman_grid).as_bytes(),
    )?;
    m.write(
        &args.out,
        "heatmap_r2.csv",
        EvalReport::heatmap_csv(&report.r2_grid).as_bytes(),
    )?;
    let table = report.top_table();
    m.write(&args.out, "top10.txt", table.as_bytes())?;
    print!("{table}");

    if args.lambda_sweep {
        let rows = lambda_sweep(&ds, &LAMBDA_GRID, fold_seed)?;
        let mut csv = String::from("lambda,best_layer,best_head,best_cv_spearman\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                r.lambda,
                r.best_head.layer + 1,
                r.best_head.head + 1,
                fmt_opt(r.best_cv_spearman)
            ));
        }
        m.write(&args.out, "lambda_sweep.csv", csv.as_bytes())?;
        println!("\n{csv}");
    }
    if args.robustness {
        let rows = robustness_suite(&ds, &opts, args.permute_seed)?;
        let mut csv = String::from("transform,best_cv_spearman,best_cv_r2\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{}\n",
                r.transform,
                fmt_opt(r.best_cv_spearman),
                fmt_opt(r.best_cv_r2)
            ));
        }
        m.write(&args.out, "robustness.csv", csv.as_bytes())?;
        println!("\n{csv}");
    }
    m.finish(&args.out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.6}"))
}

pub fn ensemble(args: &EnsembleArgs, config: &FileConfig, jobs: usize) -> Result<()> {
    let mode = match args.mode {
        ModeArg::Paper => LeakageMode::Paper,
        ModeArg::Nested => LeakageMode::Nested,
    };
    let mut m = Manifest::new(
        "ensemble",
        Value::Null,
        json!({ "split_seed": args.seed }),
        jobs,
    );
    let bank = load_bank(&args.bank, &mut m)?;
    let ds = load_dataset(&args.dump, args.labels.as_ref(), &mut m)?;
    bank.check_shape(&ds)?;
    note_fingerprint(&bank, &ds, &mut m);
    let ks = args
        .ks
        .clone()
        .or_else(|| config.ks.clone())
        .unwrap_or_else(|| default_k_grid(bank.num_heads()));
    m.set_config(json!({ "ks": ks, "mode": args.mode }));
    let points = ensemble_curve(&ds, &bank, &ks, mode, args.seed)?;
    let mut report = EvalReport::from_bank(&bank, 0);
    report.ensemble = points;
    create_dir(&args.out)?;
    let csv = report.ensemble_csv();
    m.write(&args.out, "ensemble.csv", csv.as_bytes())?;
    print!("{csv}");
    m.finish(&args.out)
}

pub fn transfer(args: &TransferArgs, config: &FileConfig, jobs: usize) -> Result<()> {
    let mut m = Manifest::new("transfer", Value::Null, Value::Null, jobs);
    let bank = load_bank(&args.bank, &mut m)?;
    let ds = load_dataset(&args.dump, args.labels.as_ref(), &mut m)?;
    let k = resolve_k(args.k, config, &bank, &mut m)?;
    m.set_config(json!({ "k": k }));
    let report = transfer_eval(&bank, &ds, k)?;
    create_dir(&args.out)?;

    let mut csv = String::from("id,group,label,prediction\n");
    for (i, p) in report.predictions.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            ds.ids()[i],
            ds.groups()[i],
            ds.labels()[i],
            p
        ));
    }
    m.write(&args.out, "predictions.csv", csv.as_bytes())?;
    let groups: BTreeMap<&str, Value> = report
        .per_group
        .iter()
        .map(|(g, r)| (g.as_str(), r.map_or(Value::Null, Value::from)))
        .collect();
    let summary = json!({ "k": k, "spearman": report.spearman, "per_group": groups });
    let mut text =
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    m.write(&args.out, "transfer.json", text.as_bytes())?;

    println!("K = {k}  spearman = {:.6}", report.spearman);
    for (g, r) in &report.per_group {
        println!("  {g}: {}", fmt_opt(*r));
    }
    m.finish(&args.out)
}

// ---------------------------------------------------------------------------
// Generating commands
// ---------------------------------------------------------------------------

struct GenInputs {
    model: ToyTransformer,
    bank: ProbeBank,
    prompts: Vec<PromptLine>,
    steps: usize,
    temperature: Option<f64>,
}

fn gen_inputs(g: &GenArgs, config: &FileConfig, m: &mut Manifest) -> Result<GenInputs> {
    let model = load_model(&g.model, m)?;
    let bank = load_bank(&g.bank, m)?;
    let prompts = load_prompts(&g.prompts, m)?;
    let steps = g.steps.or(config.steps).unwrap_or(DEFAULT_STEPS);
    if steps == 0 {
        return Err(Error::Validation("--steps must be >= 1".into()));
    }
    Ok(GenInputs {
        model,
        bank,
        prompts,
        steps,
        temperature: g.temperature.or(config.temperature),
    })
}

fn summary_json(s: &TraceSummary) -> Value {
    let mom = |m: &headprobe::monitor::Moments| json!({ "count": m.count, "mean": m.mean, "std": m.std, "min": m.min, "max": m.max });
    let per: BTreeMap<&str, Value> = s
        .per_issue
        .iter()
        .map(|(k, v)| (k.as_str(), mom(v)))
        .collect();
    json!({ "overall": mom(&s.overall), "per_issue": per })
}

/// Writes traces in the requested format plus `summary.json`. Trace and
/// steer share this so their outputs are directly comparable.
fn write_traces(
    traces: &[Trace],
    format: FormatArg,
    vocab: Option<&PathBuf>,
    autoscale: bool,
    out: &Path,
    m: &mut Manifest,
) -> Result<()> {
    create_dir(out)?;
    let csv = traces_csv(traces)?;
    m.write(out, "traces.csv", csv.as_bytes())?;
    let words: Vec<String> = match vocab {
        Some(p) => {
            m.input(p);
            read_text(p)?.lines().map(str::to_string).collect()
        }
        None => Vec::new(),
    };
    let text = |t: TokenId| {
        words
            .get(t as usize)
            .cloned()
            .unwrap_or_else(|| token_id_text(t))
    };
    // Labels span [-1, 1], so that is the default palette range.
    let bound = if !autoscale {
        1.0
    } else {
        traces
            .iter()
            .flat_map(|t| t.ensemble_scores())
            .filter(|s| s.is_finite())
            .fold(0.0f64, |a, s| a.max(s.abs()))
    };
    let bound = if bound > 0.0 { bound } else { 1.0 };
    let render = |fmt: AnnotateFormat| -> Result<String> {
        let mut out = String::new();
        for t in traces {
            out.push_str(&annotate(t, &text, (-bound, bound), fmt)?);
            out.push('\n');
        }
        Ok(out)
    };
    match format {
        FormatArg::Csv => {}
        FormatArg::Ansi => {
            let s = render(AnnotateFormat::Ansi)?;
            m.write(out, "traces.ansi", s.as_bytes())?;
            print!("{s}");
        }
        FormatArg::Html => {
            let body = render(AnnotateFormat::Html)?;
            let page = format!(
                "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>headprobe trace</title></head>\n\
                 <body style=\"font-family: monospace\">\n{body}</body></html>\n"
            );
            m.write(out, "traces.html", page.as_bytes())?;
        }
    }
    let summary = summarize(traces)?;
    let mut s = serde_json::to_string_pretty(&summary_json(&summary))
        .map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    m.write(out, "summary.json", s.as_bytes())?;
    eprintln!(
        "{} events: mean {:.4}, std {:.4}, range [{:.4}, {:.4}]",
        summary.overall.count,
        summary.overall.mean,
        summary.overall.std,
        summary.overall.min,
        summary.overall.max
    );
    Ok(())
}

pub fn trace_cmd(args: &TraceArgs, config: &FileConfig, jobs: usize) -> Result<()> {
    let mut m = Manifest::new("trace", Value::Null, Value::Null, jobs);
    let inp = gen_inputs(&args.gen, config, &mut m)?;
    let tracked = match &args.head {
        Some(h) => Tracked::Head(parse_head(h)?),
        None => Tracked::TopK(resolve_k(args.k, config, &inp.bank, &mut m)?),
    };
    let sampler = sampler(inp.temperature, args.gen.seed)?;
    let traces = inp
        .prompts
        .iter()
        .map(|p| {
            trace(
                &inp.model, &inp.bank, &tracked, &p.issue, &p.tokens, inp.steps, sampler,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let tracked_json = match tracked {
        Tracked::TopK(k) => json!({ "top_k": k }),
        Tracked::Head(h) => json!({ "head": h.to_string() }),
    };
    m.set_config(json!({
        "tracked": tracked_json,
        "steps": inp.steps,
        "temperature": inp.temperature,
        "format": args.format,
        "autoscale": args.autoscale,
    }));
    m.set_seeds(json!({ "sample_seed": args.gen.seed }));
    write_traces(
        &traces,
        args.format,
        args.vocab.as_ref(),
        args.autoscale,
        &args.gen.out,
        &mut m,
    )?;
    m.finish(&args.gen.out)
}

pub fn steer(args: &SteerArgs, config: &FileConfig, jobs: usize) -> Result<()> {
    let mut m = Manifest::new("steer", Value::Null, Value::Null, jobs);
    let inp = gen_inputs(&args.gen, config, &mut m)?;
    let k = resolve_k(args.k, config, &inp.bank, &mut m)?;
    let layers = parse_layers(args.layers.as_deref())?;
    let opts = PlanOptions {
        alpha: args.alpha,
        k,
        layers,
        normalize: args.normalize,
        reselect: args.reselect,
    };
    let plan = build_plan(&inp.bank, &opts)?;
    for w in &plan.warnings {
        eprintln!("warning: {w}");
        m.note(w.clone());
    }
    let sampler = sampler(inp.temperature, args.gen.seed)?;
    let traces = inp
        .prompts
        .iter()
        .map(|p| {
            steer_generate(
                &inp.model, &inp.bank, &plan, &p.issue, &p.tokens, inp.steps, sampler,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    m.set_config(json!({
        "alpha": args.alpha,
        "k": k,
        "layers": layers_display(layers),
        "normalize": args.normalize,
        "reselect": args.reselect,
        "targets": plan.targets.iter().map(|t| t.head.to_string()).collect::<Vec<_>>(),
        "steps": inp.steps,
        "temperature": inp.temperature,
    }));
    m.set_seeds(json!({ "sample_seed": args.gen.seed }));
    write_traces(&traces, FormatArg::Csv, None, false, &args.gen.out, &mut m)?;
    m.finish(&args.gen.out)
}

pub fn sweep(args: &SweepArgs, config: &FileConfig, jobs: usize) -> Result<()> {
    let mut m = Manifest::new("sweep", Value::Null, Value::Null, jobs);
    let inp = gen_inputs(&args.gen, config, &mut m)?;
    let mut cfg = SweepConfig::defaults_for(inp.bank.num_heads());
    if let Some(a) = args.alphas.clone().or_else(|| config.alphas.clone()) {
        cfg.alphas = a;
    }
    if let Some(k) = args.ks.clone().or_else(|| config.ks.clone()) {
        cfg.ks = k;
    }
    if let Some(s) = args.seeds.clone().or_else(|| config.seeds.clone()) {
        cfg.seeds = s;
    }
    cfg.steps = inp.steps;
    cfg.layers = parse_layers(args.layers.as_deref())?;
    cfg.normalize = args.normalize;
    cfg.reselect = args.reselect;
    cfg.temperature = inp.temperature;
    if let Some(t) = cfg.temperature {
        sampler(Some(t), 0)?;
    }
    m.set_config(json!({
        "alphas": cfg.alphas,
        "ks": cfg.ks,
        "steps": cfg.steps,
        "layers": layers_display(cfg.layers),
        "normalize": cfg.normalize,
        "reselect": cfg.reselect,
        "temperature": cfg.temperature,
    }));
    m.set_seeds(json!({ "sample_seeds": cfg.seeds }));
    let result = alpha_k_sweep(&inp.model, &inp.bank, &inp.prompts, &cfg)?;
    create_dir(&args.gen.out)?;
    m.write(
        &args.gen.out,
        "sweep_rows.csv",
        result.rows_csv().as_bytes(),
    )?;
    m.write(
        &args.gen.out,
        "sweep_summary.csv",
        result.summary_csv().as_bytes(),
    )?;
    let s = &result.summary;
    println!(
        "alpha vs slant (per-alpha means): {}   pooled: {}   coherent rows: {:.1}%",
        fmt_opt(s.mean_curve.alpha_slant),
        fmt_opt(s.pooled.alpha_slant),
        100.0 * s.coherent_fraction
    );
    m.finish(&args.gen.out)
}
