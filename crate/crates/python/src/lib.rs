// SPDX-License-Identifier: MIT OR Apache-2.0

//! Python bindings. Head indices are 0-based `(layer, head)` tuples here,
//! matching the Rust API; only the CLI prints 1-based indices.

use std::path::PathBuf;

use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use headprobe::dataset::{transform_labels, ActivationTensor, LabelTransform, ProbeDataset};
use headprobe::monitor::{self, Tracked};
use headprobe::probes::{self, FitOptions, LeakageMode};
use headprobe::steering::{self, LayerFilter, PlanOptions, SweepConfig};
use headprobe::toymodel::{HeadId, Sampler, TokenId, ToyTransformer};
use headprobe::{numkit, traceio, ErrorClass};

pyo3::create_exception!(headprobe, HeadprobeError, PyException);
pyo3::create_exception!(headprobe, ValidationError, HeadprobeError);
pyo3::create_exception!(headprobe, ParseError, HeadprobeError);
pyo3::create_exception!(headprobe, NumericError, HeadprobeError);
pyo3::create_exception!(headprobe, IoError, HeadprobeError);

fn to_py(e: headprobe::Error) -> PyErr {
    let msg = e.to_string();
    match e.class() {
        ErrorClass::Validation => ValidationError::new_err(msg),
        ErrorClass::Parse => ParseError::new_err(msg),
        ErrorClass::Numeric => NumericError::new_err(msg),
        ErrorClass::Io => IoError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for headprobe::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// `(issue, token ids)`
type Prompt = (String, Vec<TokenId>);

fn head(h: HeadId) -> (usize, usize) {
    (h.layer, h.head)
}

fn sampler(temperature: Option<f64>, seed: u64) -> Sampler {
    match temperature {
        None => Sampler::Greedy,
        Some(temperature) => Sampler::Temperature { temperature, seed },
    }
}

/// Labelled activations, `n x layers x heads x dim`.
#[pyclass(frozen, module = "headprobe")]
pub struct Dataset {
    inner: ProbeDataset,
}

#[pymethods]
impl Dataset {
    /// Reads an APRB dump. Dumps without labels are rejected.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: traceio::read_dump(&path).py_err()?,
        })
    }

    /// Builds a dataset from flat row-major activations.
    #[staticmethod]
    fn from_arrays(
        labels: Vec<f64>,
        activations: Vec<f32>,
        layers: usize,
        heads: usize,
        dim: usize,
    ) -> PyResult<Self> {
        let n = labels.len();
        let acts = ActivationTensor::new(n, layers, heads, dim, activations).py_err()?;
        Ok(Self {
            inner: ProbeDataset::from_parts(labels, acts).py_err()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        traceio::write_dump(&self.inner, &path).py_err()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(n, layers, heads, dim)`
    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        self.inner.activations().dims()
    }

    #[getter]
    fn labels(&self) -> Vec<f64> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.ids().to_vec()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    /// Activations of one head for one sample.
    fn head_vector(&self, sample: usize, layer: usize, head: usize) -> PyResult<Vec<f32>> {
        let (n, l, h, _) = self.inner.activations().dims();
        if sample >= n || layer >= l || head >= h {
            return Err(ValidationError::new_err("index out of range"));
        }
        Ok(self
            .inner
            .activations()
            .head_vector(sample, HeadId::new(layer, head))
            .to_vec())
    }

    /// Copy with transformed labels: `"cubic"`, `"sin10"` or `"permute"`.
    #[pyo3(signature = (kind, seed = 0))]
    fn transformed(&self, kind: &str, seed: u64) -> PyResult<Self> {
        let t = match kind {
            "cubic" => LabelTransform::Cubic,
            "sin10" => LabelTransform::Sin10,
            "permute" => LabelTransform::Permute { seed },
            other => {
                return Err(ValidationError::new_err(format!(
                    "unknown transform {other:?}"
                )))
            }
        };
        Ok(Self {
            inner: transform_labels(&self.inner, &t).py_err()?,
        })
    }

    fn __repr__(&self) -> String {
        let (n, l, h, d) = self.inner.activations().dims();
        format!("Dataset(n={n}, layers={l}, heads={h}, dim={d})")
    }
}

/// One fitted ridge probe per head plus the head ranking.
#[pyclass(frozen, module = "headprobe")]
pub struct ProbeBank {
    inner: probes::ProbeBank,
}

impl ProbeBank {
    fn check_head(&self, layer: usize, head: usize) -> PyResult<HeadId> {
        let (l, h, _) = self.inner.shape();
        if layer >= l || head >= h {
            return Err(ValidationError::new_err(format!(
                "head ({layer}, {head}) not in bank"
            )));
        }
        Ok(HeadId::new(layer, head))
    }
}

#[pymethods]
impl ProbeBank {
    #[staticmethod]
    #[pyo3(signature = (dataset, lambda_ = probes::DEFAULT_LAMBDA, fold_seed = 0))]
    fn fit(py: Python<'_>, dataset: &Dataset, lambda_: f64, fold_seed: u64) -> PyResult<Self> {
        let opts = FitOptions {
            lambda: lambda_,
            fold_seed,
        };
        let inner = py
            .detach(|| probes::fit_bank(&dataset.inner, &opts))
            .py_err()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: traceio::load_bank(&path).py_err()?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: traceio::decode_bank(text).py_err()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        traceio::save_bank(&self.inner, &path).py_err()
    }

    fn to_json(&self) -> PyResult<String> {
        traceio::encode_bank(&self.inner).py_err()
    }

    /// `(layers, heads, dim)`
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.shape()
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.inner.lambda()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    /// Heads by descending cross-validated Spearman.
    fn ranking(&self) -> Vec<(usize, usize)> {
        self.inner.ranking().iter().copied().map(head).collect()
    }

    fn best(&self) -> (usize, usize) {
        head(self.inner.best().head)
    }

    fn cv_spearman(&self, layer: usize, head: usize) -> PyResult<Option<f64>> {
        Ok(self.inner.probe(self.check_head(layer, head)?).cv_spearman)
    }

    fn sigma_hat(&self, layer: usize, head: usize) -> PyResult<f64> {
        Ok(self.inner.probe(self.check_head(layer, head)?).sigma_hat)
    }

    fn theta(&self, layer: usize, head: usize) -> PyResult<Vec<f64>> {
        Ok(self
            .inner
            .probe(self.check_head(layer, head)?)
            .theta
            .clone())
    }

    /// Score of one head's probe on an activation vector.
    fn predict(&self, layer: usize, head: usize, x: Vec<f64>) -> PyResult<f64> {
        self.inner
            .probe(self.check_head(layer, head)?)
            .predict(&x)
            .py_err()
    }

    /// Top-K ensemble score for every sample of `dataset`.
    fn ensemble_predictions(&self, dataset: &Dataset, k: usize) -> PyResult<Vec<f64>> {
        self.inner.ensemble_predictions(&dataset.inner, k).py_err()
    }

    /// Frozen-probe transfer: `(spearman, {group: spearman or None})`.
    #[pyo3(signature = (dataset, k = probes::DEFAULT_K))]
    fn transfer(&self, py: Python<'_>, dataset: &Dataset, k: usize) -> PyResult<(f64, Py<PyDict>)> {
        let r = probes::transfer_eval(&self.inner, &dataset.inner, k).py_err()?;
        let groups = PyDict::new(py);
        for (g, v) in r.per_group {
            groups.set_item(g, v)?;
        }
        Ok((r.spearman, groups.unbind()))
    }

    /// Cross-validated ensemble curve as `[(k, spearman or None)]`.
    #[pyo3(signature = (dataset, ks = None, mode = "paper", seed = 1))]
    fn ensemble_curve(
        &self,
        py: Python<'_>,
        dataset: &Dataset,
        ks: Option<Vec<usize>>,
        mode: &str,
        seed: u64,
    ) -> PyResult<Vec<(usize, Option<f64>)>> {
        let mode: LeakageMode = mode.parse().py_err()?;
        let ks = ks.unwrap_or_else(|| probes::default_k_grid(self.inner.num_heads()));
        let pts = py
            .detach(|| probes::ensemble_curve(&dataset.inner, &self.inner, &ks, mode, seed))
            .py_err()?;
        Ok(pts.into_iter().map(|p| (p.k, p.cv_spearman)).collect())
    }

    fn __repr__(&self) -> String {
        let (l, h, d) = self.inner.shape();
        let b = self.inner.best();
        let score = b
            .cv_spearman
            .map_or_else(|| "None".to_string(), |s| format!("{s:.4}"));
        format!(
            "ProbeBank(layers={l}, heads={h}, dim={d}, best=({}, {}), cv_spearman={score})",
            b.head.layer, b.head.head
        )
    }
}

/// The toy transformer used for tracing and steering.
#[pyclass(frozen, module = "headprobe")]
pub struct Model {
    inner: ToyTransformer,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: traceio::load_model(&path).py_err()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        traceio::save_model(&self.inner, &path).py_err()
    }

    /// `(layers, heads, head_dim, model_dim, vocab)`
    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize, usize) {
        let c = self.inner.config();
        (c.layers, c.heads, c.head_dim, c.model_dim, c.vocab)
    }

    /// Prompt plus generated tokens.
    #[pyo3(signature = (prompt, steps, temperature = None, seed = 0))]
    fn generate(
        &self,
        prompt: Vec<TokenId>,
        steps: usize,
        temperature: Option<f64>,
        seed: u64,
    ) -> PyResult<Vec<TokenId>> {
        let g = self
            .inner
            .generate(&prompt, steps, None, sampler(temperature, seed), None)
            .py_err()?;
        Ok(g.tokens)
    }

    /// Final-position logits of an unsteered forward pass.
    fn logits(&self, tokens: Vec<TokenId>) -> PyResult<Vec<f64>> {
        Ok(self
            .inner
            .forward(&tokens, None)
            .py_err()?
            .last_logits()
            .to_vec())
    }
}

fn trace_dict<'py>(py: Python<'py>, t: &monitor::Trace) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("issue", &t.issue)?;
    d.set_item("tokens", &t.tokens)?;
    d.set_item("prompt_len", t.prompt_len)?;
    d.set_item(
        "tracked",
        t.tracked.iter().copied().map(head).collect::<Vec<_>>(),
    )?;
    d.set_item("scores", t.ensemble_scores())?;
    d.set_item(
        "head_scores",
        t.events
            .iter()
            .map(|e| e.head_scores.clone())
            .collect::<Vec<_>>(),
    )?;
    Ok(d)
}

/// Builds the planted demo: `(model, dataset, [(issue, prompt tokens)])`.
#[pyfunction]
#[pyo3(signature = (seed = 0, gain = 1.0, n = 500))]
fn demo(seed: u64, gain: f64, n: usize) -> PyResult<(Model, Dataset, Vec<Prompt>)> {
    let cfg = headprobe::demo::DemoConfig {
        seed,
        gain,
        n,
        ..Default::default()
    };
    let d = headprobe::demo::build_demo(&cfg).py_err()?;
    let prompts = d.prompts.into_iter().map(|p| (p.issue, p.tokens)).collect();
    Ok((
        Model { inner: d.model },
        Dataset { inner: d.dataset },
        prompts,
    ))
}

/// Generates and scores each new token with the top-K ensemble, or with a
/// single head when `head` is given.
#[pyfunction]
#[pyo3(signature = (model, bank, prompt, steps = 16, k = None, head = None, temperature = None, seed = 0, issue = ""))]
#[allow(clippy::too_many_arguments)]
fn trace<'py>(
    py: Python<'py>,
    model: &Model,
    bank: &ProbeBank,
    prompt: Vec<TokenId>,
    steps: usize,
    k: Option<usize>,
    head: Option<(usize, usize)>,
    temperature: Option<f64>,
    seed: u64,
    issue: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let tracked = match head {
        Some((l, h)) => Tracked::Head(HeadId::new(l, h)),
        None => Tracked::TopK(k.unwrap_or(probes::DEFAULT_K.min(bank.inner.num_heads()))),
    };
    let t = monitor::trace(
        &model.inner,
        &bank.inner,
        &tracked,
        issue,
        &prompt,
        steps,
        sampler(temperature, seed),
    )
    .py_err()?;
    trace_dict(py, &t)
}

fn layer_filter(layers: Option<(usize, usize)>) -> LayerFilter {
    layers.map_or(LayerFilter::All, |(lo, hi)| LayerFilter::Range { lo, hi })
}

/// Generates with `alpha * sigma_hat * theta` added to the top-K heads.
/// `layers` is an inclusive 0-based `(lo, hi)` range.
#[pyfunction]
#[pyo3(signature = (model, bank, prompt, alpha, k = None, steps = 16, layers = None, normalize = false, reselect = false, temperature = None, seed = 0, issue = ""))]
#[allow(clippy::too_many_arguments)]
fn steer<'py>(
    py: Python<'py>,
    model: &Model,
    bank: &ProbeBank,
    prompt: Vec<TokenId>,
    alpha: f64,
    k: Option<usize>,
    steps: usize,
    layers: Option<(usize, usize)>,
    normalize: bool,
    reselect: bool,
    temperature: Option<f64>,
    seed: u64,
    issue: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let opts = PlanOptions {
        alpha,
        k: k.unwrap_or(probes::DEFAULT_K.min(bank.inner.num_heads())),
        layers: layer_filter(layers),
        normalize,
        reselect,
    };
    let plan = steering::build_plan(&bank.inner, &opts).py_err()?;
    let t = steering::steer_generate(
        &model.inner,
        &bank.inner,
        &plan,
        issue,
        &prompt,
        steps,
        sampler(temperature, seed),
    )
    .py_err()?;
    let d = trace_dict(py, &t)?;
    d.set_item(
        "targets",
        plan.targets
            .iter()
            .map(|t| head(t.head))
            .collect::<Vec<_>>(),
    )?;
    d.set_item("warnings", plan.warnings)?;
    Ok(d)
}

/// Runs the alpha x K grid over `prompts` (a list of `(issue, tokens)`).
#[pyfunction]
#[pyo3(signature = (model, bank, prompts, alphas = None, ks = None, seeds = None, steps = None))]
#[allow(clippy::too_many_arguments)]
fn sweep<'py>(
    py: Python<'py>,
    model: &Model,
    bank: &ProbeBank,
    prompts: Vec<Prompt>,
    alphas: Option<Vec<f64>>,
    ks: Option<Vec<usize>>,
    seeds: Option<Vec<u64>>,
    steps: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = SweepConfig::defaults_for(bank.inner.num_heads());
    if let Some(a) = alphas {
        cfg.alphas = a;
    }
    if let Some(k) = ks {
        cfg.ks = k;
    }
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let prompts: Vec<monitor::PromptLine> = prompts
        .into_iter()
        .map(|(issue, tokens)| monitor::PromptLine { issue, tokens })
        .collect();
    let r = py
        .detach(|| steering::alpha_k_sweep(&model.inner, &bank.inner, &prompts, &cfg))
        .py_err()?;
    let d = PyDict::new(py);
    d.set_item("alpha_slant_spearman", r.summary.mean_curve.alpha_slant)?;
    d.set_item("pooled_alpha_slant_spearman", r.summary.pooled.alpha_slant)?;
    d.set_item("coherent_fraction", r.summary.coherent_fraction)?;
    let rows = r
        .rows
        .iter()
        .map(|row| {
            let x = PyDict::new(py);
            x.set_item("alpha", row.alpha)?;
            x.set_item("k", row.k)?;
            x.set_item("issue", &row.issue)?;
            x.set_item("prompt", row.prompt)?;
            x.set_item("seed", row.seed)?;
            x.set_item("length", row.length)?;
            x.set_item("slant_proxy", row.slant_proxy)?;
            x.set_item("coherence", row.coherence)?;
            x.set_item("coherent", row.coherent)?;
            Ok(x)
        })
        .collect::<PyResult<Vec<_>>>()?;
    d.set_item("rows", rows)?;
    Ok(d)
}

/// Spearman rank correlation with average ranks for ties.
#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    numkit::spearman(&x, &y).py_err()
}

#[pymodule]
#[pyo3(name = "headprobe")]
fn headprobe_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Dataset>()?;
    m.add_class::<ProbeBank>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(demo, m)?)?;
    m.add_function(wrap_pyfunction!(trace, m)?)?;
    m.add_function(wrap_pyfunction!(steer, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    let py = m.py();
    m.add("HeadprobeError", py.get_type::<HeadprobeError>())?;
    m.add("ValidationError", py.get_type::<ValidationError>())?;
    m.add("ParseError", py.get_type::<ParseError>())?;
    m.add("NumericError", py.get_type::<NumericError>())?;
    m.add("IoError", py.get_type::<IoError>())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_runs_a_fit_from_python() {
        Python::attach(|py| {
            let m = PyModule::new(py, "headprobe").unwrap();
            headprobe_module(&m).unwrap();
            let locals = PyDict::new(py);
            locals.set_item("hp", m).unwrap();
            py.run(
                c"model, data, prompts = hp.demo(n=200)\n\
                  bank = hp.ProbeBank.fit(data)\n\
                  best = bank.best()\n\
                  try:\n    hp.ProbeBank.from_json('{}')\n    raised = False\n\
                  except hp.ParseError:\n    raised = True\n",
                None,
                Some(&locals),
            )
            .unwrap();
            let best: (usize, usize) = locals.get_item("best").unwrap().unwrap().extract().unwrap();
            assert_eq!(best, (2, 5));
            assert!(locals
                .get_item("raised")
                .unwrap()
                .unwrap()
                .extract::<bool>()
                .unwrap());
        });
    }
}
