//! AUC evaluation, report emission, Grad-CAM heatmaps and the
//! freeze-and-probe domain-confusion measurement.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::losses;
use crate::nets::{self, BackboneConfig, BackboneKind, Bound, ModelState};
use crate::synthdata::{DomainDataset, Image, Label, Samples};
use crate::tensor::Tensor;
use crate::trainer::{Sgd, TrainTrace};

/// Twice the Mann–Whitney U statistic and twice the pair count, both exact
/// integers; `auc = num / den`.
pub fn auc_counts(scores: &[f64], labels: &[Label]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::Size(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Domain(format!("score {s} is not a number")));
    }
    let pos = labels.iter().filter(|&&l| l == Label::Fake).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both real and fake samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Doubled ranks keep tied (average) ranks integral.
    let mut rank_sum2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg2 = (i + 1 + j + 1) as u64;
        let fakes = order[i..=j].iter().filter(|&&k| labels[k] == Label::Fake).count() as u64;
        rank_sum2 += avg2 * fakes;
        i = j + 1;
    }
    let u2 = rank_sum2 - pos * (pos + 1);
    Ok((u2, 2 * pos * neg))
}

/// Area under the ROC curve: probability that a fake outscores a real,
/// ties counted one half. Fake is the positive class.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (num, den) = auc_counts(scores, labels)?;
    Ok(num as f64 / den as f64)
}

/// Fake-class probabilities `softmax(G(F′(x)))[1]` in evaluation mode.
pub fn fake_scores(state: &ModelState, images: &[&Image]) -> Result<Vec<f64>> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let ts: Vec<Tensor> = chunk.iter().map(|i| i.to_tensor()).collect();
        let refs: Vec<&Tensor> = ts.iter().collect();
        let logits = state.logits(&Tensor::stack(&refs)?)?;
        let p = losses::distill_prob_values(&logits, 1.0)?;
        out.extend(p.data().chunks_exact(2).map(|r| r[1]));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainResult {
    pub id: String,
    pub n_test: usize,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub stage: String,
    pub config_digest: String,
    pub domains: Vec<DomainResult>,
}

impl EvalReport {
    pub fn auc_of(&self, id: &str) -> Option<f64> {
        self.domains.iter().find(|d| d.id == id).map(|d| d.auc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))
    }
}

/// One AUC per domain over its test split, in input order.
pub fn evaluate_domains(
    state: &ModelState,
    domains: &[&DomainDataset],
    run_id: &str,
    stage: &str,
    config_digest: &str,
) -> Result<EvalReport> {
    let mut results = Vec::with_capacity(domains.len());
    for d in domains {
        let Samples::Labeled(test) = &d.test else {
            return Err(Error::Config(format!(
                "domain {} has no ground-truth test labels",
                d.domain_id
            )));
        };
        let images: Vec<&Image> = test.iter().map(|s| s.image.as_ref()).collect();
        let labels: Vec<Label> = test.iter().map(|s| s.label).collect();
        let scores = fake_scores(state, &images)?;
        results.push(DomainResult {
            id: d.domain_id.clone(),
            n_test: test.len(),
            auc: auc(&scores, &labels)?,
        });
    }
    Ok(EvalReport {
        run_id: run_id.to_string(),
        stage: stage.to_string(),
        config_digest: config_digest.to_string(),
        domains: results,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub side: usize,
    /// Row-major `side × side` values in `[0, 1]`.
    pub values: Vec<f64>,
    pub target_layer: String,
}

impl Heatmap {
    /// Blue-to-red false-colour rendering.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut img = image::RgbImage::new(self.side as u32, self.side as u32);
        for (i, &v) in self.values.iter().enumerate() {
            let r = (255.0 * (1.5 * v - 0.25).clamp(0.0, 1.0)) as u8;
            let g = (255.0 * (1.0 - (2.0 * v - 1.0).abs())) as u8;
            let b = (255.0 * (1.25 - 1.5 * v).clamp(0.0, 1.0)) as u8;
            img.put_pixel((i % self.side) as u32, (i / self.side) as u32, image::Rgb([r, g, b]));
        }
        img
    }
}

pub fn default_gradcam_layer(cfg: &BackboneConfig) -> Option<&'static str> {
    match cfg.kind {
        BackboneKind::DualVit => Some(nets::LAYER_FREQ_CONV),
        BackboneKind::TinyVit => Some(nets::LAYER_VISUAL_TOKENS),
        BackboneKind::TinyCnn => Some(nets::LAYER_CNN_CONV),
        BackboneKind::Mlp => None,
    }
}

/// Grad-CAM from an activation map `[h, w, c]` and the gradient of the
/// class logit with respect to it: channel weights are spatially averaged
/// gradients; the weighted sum is rectified, bilinearly upsampled to
/// `side × side` and min-max normalised (all zeros when flat).
pub fn gradcam_from(act: &Tensor, grad: &Tensor, side: usize, layer: &str) -> Heatmap {
    let s = act.shape();
    let (h, w, c) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
    let (a, gr) = (act.data(), grad.data());
    let mut weights = vec![0.0; c];
    for p in 0..h * w {
        for k in 0..c {
            weights[k] += gr[p * c + k];
        }
    }
    weights.iter_mut().for_each(|v| *v /= (h * w) as f64);
    let cam: Vec<f64> = (0..h * w)
        .map(|p| {
            (0..c)
                .map(|k| weights[k] * a[p * c + k])
                .sum::<f64>()
                .max(0.0)
        })
        .collect();
    let mut values = vec![0.0; side * side];
    for r in 0..side {
        let y = ((r as f64 + 0.5) * h as f64 / side as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(h - 1);
        for col in 0..side {
            let x = ((col as f64 + 0.5) * w as f64 / side as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(w - 1);
            values[r * side + col] = (1.0 - fy) * ((1.0 - fx) * cam[y0 * w + x0] + fx * cam[y0 * w + x1])
                + fy * ((1.0 - fx) * cam[y1 * w + x0] + fx * cam[y1 * w + x1]);
        }
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
    Heatmap {
        side,
        values,
        target_layer: layer.to_string(),
    }
}

/// Grad-CAM of the deployed detector `G∘F′` for `target_class` at
/// `target_layer`.
pub fn gradcam_map(state: &ModelState, image: &Image, target_layer: &str, target_class: usize) -> Result<Heatmap> {
    if target_class > 1 {
        return Err(Error::Domain(format!("class {target_class} outside {{0, 1}}")));
    }
    let x = image.to_tensor();
    let batch = Tensor::stack(&[&x])?;
    state.check_input(&batch)?;
    let mut g = Graph::new();
    let fp = Bound::new(&mut g, &state.f_prime, true);
    let xv = g.constant(batch);
    let out = nets::extract(&mut g, &state.backbone, &fp, xv, None);
    let Some(&act) = out.activations.get(target_layer) else {
        let known: Vec<&str> = out.activations.keys().copied().collect();
        return Err(Error::Config(format!(
            "unknown Grad-CAM layer `{target_layer}` (available: {known:?})"
        )));
    };
    let gp = Bound::new(&mut g, &state.g, false);
    let logits = nets::classify(&mut g, &gp, out.features);
    let picked = g.gather_cols(logits, &[target_class]);
    let s = g.sum_all(picked);
    let grads = g.backward(s);
    let a = g.value(act).clone();
    let gr = grads.get(act).cloned().unwrap_or_else(|| Tensor::zeros(a.shape()));
    Ok(gradcam_from(&a, &gr, image.side(), target_layer))
}

/// A heatmap to be written as `<domain>_<index>_<class>.png`.
pub struct NamedHeatmap {
    pub domain: String,
    pub index: usize,
    pub class: Label,
    pub map: Heatmap,
}

impl NamedHeatmap {
    pub fn file_name(&self) -> String {
        let class = match self.class {
            Label::Real => "real",
            Label::Fake => "fake",
        };
        format!("{}_{}_{}.png", self.domain, self.index, class)
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Markdown table of per-domain AUCs; the first domain is the source.
pub fn summary_markdown(report: &EvalReport) -> String {
    let mut s = format!(
        "# Evaluation: {} ({})\n\nConfig digest `{}`\n\n| domain | role | n_test | AUC |\n|---|---|---:|---:|\n",
        report.run_id, report.stage, report.config_digest
    );
    for (i, d) in report.domains.iter().enumerate() {
        let role = if i == 0 { "source" } else { "target" };
        s.push_str(&format!("| {} | {} | {} | {:.4} |\n", d.id, role, d.n_test, d.auc));
    }
    s
}

/// Writes `report.json`, `trace.csv`, `summary.md` and any heatmaps into
/// `out_dir`. Refuses to touch an existing report unless `overwrite`.
pub fn emit_report(
    report: &EvalReport,
    trace: &TrainTrace,
    heatmaps: &[NamedHeatmap],
    out_dir: &Path,
    overwrite: bool,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let report_path = out_dir.join("report.json");
    if !overwrite && report_path.exists() {
        return Err(Error::Overwrite(report_path));
    }
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = out_dir.join(name);
        write_file(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    put("report.json", report.to_json().as_bytes())?;
    put("trace.csv", trace.to_csv().as_bytes())?;
    put("summary.md", summary_markdown(report).as_bytes())?;
    for h in heatmaps {
        let p = out_dir.join(h.file_name());
        h.map.to_rgb8().save(&p).map_err(|e| Error::Ingestion {
            path: p.clone(),
            reason: e.to_string(),
        })?;
        written.push(p);
    }
    Ok(written)
}

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 300,
            lr: 0.05,
            seed: 0,
        }
    }
}

/// Centres features on the pooled training mean and divides by one global
/// RMS. A single scale keeps near-constant dimensions small.
fn normalise_features(train: [&Tensor; 2], all: [&Tensor; 4]) -> [Tensor; 4] {
    let d = train[0].last_dim();
    let rows = (train[0].rows() + train[1].rows()).max(1) as f64;
    let mut mean = vec![0.0; d];
    for t in train {
        for row in t.data().chunks(d) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / rows);
        }
    }
    let mut ss = 0.0;
    for t in train {
        for row in t.data().chunks(d) {
            ss += row.iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>();
        }
    }
    let rms = (ss / (rows * d as f64)).sqrt();
    let scale = if rms > 1e-12 { 1.0 / rms } else { 1.0 };
    all.map(|t| {
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(d) {
            row.iter_mut().zip(&mean).for_each(|(v, m)| *v = (*v - m) * scale);
        }
        out
    })
}

/// Freeze-and-probe: trains a fresh discriminator on frozen training
/// features (source = 1, target = 0) with full-batch SGD and returns its
/// accuracy on the held-out features. Features are centred and scaled
/// by one global factor first.
pub fn probe_domain_accuracy(
    train_src: &Tensor,
    train_tgt: &Tensor,
    test_src: &Tensor,
    test_tgt: &Tensor,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let d = train_src.last_dim();
    for t in [train_tgt, test_src, test_tgt] {
        if t.last_dim() != d || t.shape().len() != 2 {
            return Err(Error::Shape("probe features must share a width".into()));
        }
    }
    let [train_src, train_tgt, test_src, test_tgt] =
        &normalise_features([train_src, train_tgt], [train_src, train_tgt, test_src, test_tgt]);
    let probe_cfg = BackboneConfig {
        disc_hidden: cfg.hidden,
        ..BackboneConfig::mlp(d, d)
    };
    let mut q = nets::init_discriminator(&probe_cfg, cfg.seed);
    let mut opt = Sgd::new(cfg.lr, 0.9, 0.0);
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let qp = Bound::new(&mut g, &q, true);
        let (xs, xt) = (g.constant(train_src.clone()), g.constant(train_tgt.clone()));
        let ps = nets::discriminate(&mut g, &qp, xs);
        let pt = nets::discriminate(&mut g, &qp, xt);
        let adv = losses::adv(&mut g, ps, pt);
        let neg = g.scale(adv, -1.0);
        let grads = g.backward(neg);
        let gq = qp.grads(&g, &grads);
        opt.step(&mut q, &gq);
    }
    let predict = |x: &Tensor| {
        let mut g = Graph::new();
        let qp = Bound::new(&mut g, &q, false);
        let xv = g.constant(x.clone());
        let p = nets::discriminate(&mut g, &qp, xv);
        g.value(p).data().to_vec()
    };
    let (ps, pt) = (predict(test_src), predict(test_tgt));
    let hits = ps.iter().filter(|&&p| p > 0.5).count() + pt.iter().filter(|&&p| p < 0.5).count();
    Ok(hits as f64 / (ps.len() + pt.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(bits: &[u8]) -> Vec<Label> {
        bits.iter().map(|&b| if b == 1 { Label::Fake } else { Label::Real }).collect()
    }

    #[test]
    fn auc_reference_values() {
        let l = labels(&[1, 0, 1, 0]);
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.1], &l).unwrap(), 0.75);
        assert_eq!(auc(&[0.9, 0.1, 0.8, 0.2], &l).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &l).unwrap(), 0.5);
        assert!(matches!(
            auc(&[0.1, 0.2], &labels(&[1, 1])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auc_complement_without_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s: Vec<f64> = (0..30).map(|_| rng.random()).collect();
        let l: Vec<Label> = (0..30).map(|i| Label::from_index(i % 2).unwrap()).collect();
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        assert!((auc(&s, &l).unwrap() + auc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradcam_follows_known_channel() {
        // logit = mean of channel 1 → gradient 1/(h·w) on that channel only.
        let (h, w, c) = (4, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let act: Vec<f64> = (0..h * w * c).map(|_| rng.random::<f64>()).collect();
        let mut g = Graph::new();
        let a = g.param(Tensor::new(vec![1, h, w, c], act.clone()).unwrap());
        let mask: Vec<f64> = (0..h * w * c).map(|i| if i % c == 1 { 1.0 / 16.0 } else { 0.0 }).collect();
        let logit = g.dot_const(a, mask);
        let grads = g.backward(logit);
        let map = gradcam_from(g.value(a), grads.get(a).unwrap(), 4, "toy");
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|x, y| x.1.total_cmp(y.1))
                .unwrap()
                .0
        };
        let chan: Vec<f64> = (0..h * w).map(|p| act[p * c + 1]).collect();
        assert_eq!(argmax(&map.values), argmax(&chan));
        assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn gradcam_flat_map_is_zero() {
        let act = Tensor::filled(&[2, 2, 2], 1.0);
        let map = gradcam_from(&act, &Tensor::zeros(&[2, 2, 2]), 8, "x");
        assert_eq!(map.values, vec![0.0; 64]);
    }
}
