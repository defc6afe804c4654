//! Per-image evaluation rows, set-level Fréchet distance and the CSV report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{
    frechet_distance, gaussian_stats, mean_abs_error, mean_squared_error, psnr, ssim, MetricError,
    Result, SsimMode,
};
use crate::colorspace::{ColorImage, Space};
use crate::image_io::{is_supported_extension, read_rgb};
use crate::losses::{lpips_from_features, FeatureExtractor, LpipsWeights};
use crate::tensor::{Graph, Tensor};

pub const CSV_HEADER: &str = "id,L1,L2,PSNR,SSIM,LPIPS";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMetrics {
    /// Mean absolute error per value.
    pub l1: f64,
    /// Mean squared error per value.
    pub l2: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
}

impl PairMetrics {
    fn values(&self) -> [f64; 5] {
        [self.l1, self.l2, self.psnr, self.ssim, self.lpips]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairEvaluation {
    pub metrics: PairMetrics,
    /// Pooled last-layer features feeding the Fréchet statistics.
    pub truth_features: Vec<f64>,
    pub pred_features: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    pub ssim: SsimMode,
}

fn to_tensor(img: &ColorImage) -> Tensor<f64> {
    Tensor::new(vec![1, 3, img.height(), img.width()], img.data().to_vec()).expect("finite image")
}

/// Spatial mean of the extractor's last layer for one RGB image.
pub fn pooled_features(img: &ColorImage, phi: &FeatureExtractor) -> Result<Vec<f64>> {
    let mut g = Graph::<f64>::new();
    let x = g.constant(to_tensor(img));
    let last = *phi.forward(&mut g, x)?.last().expect("nonempty extractor");
    let pooled = g.global_avg_pool(last)?;
    Ok(g.value(pooled).data().to_vec())
}

pub fn evaluate_pair(
    truth: &ColorImage,
    pred: &ColorImage,
    phi: &FeatureExtractor,
    weights: &LpipsWeights,
    opts: EvalOptions,
) -> Result<PairEvaluation> {
    for img in [truth, pred] {
        if img.space() != Space::Rgb {
            return Err(crate::colorspace::ColorError::WrongSpace { expected: Space::Rgb, found: img.space() }.into());
        }
    }
    if (truth.width(), truth.height()) != (pred.width(), pred.height()) {
        return Err(MetricError::SizeMismatch(format!(
            "truth {}x{}, prediction {}x{}",
            truth.width(),
            truth.height(),
            pred.width(),
            pred.height()
        )));
    }
    let (u, v) = (truth.data(), pred.data());
    let mut g = Graph::<f64>::new();
    let tu = g.constant(to_tensor(truth));
    let tv = g.constant(to_tensor(pred));
    let fu = phi.forward(&mut g, tu)?;
    let fv = phi.forward(&mut g, tv)?;
    let lp = lpips_from_features(&mut g, &fu, &fv, weights)?;
    let mut pool = |f: &[crate::tensor::Var]| -> Result<Vec<f64>> {
        let p = g.global_avg_pool(*f.last().expect("nonempty extractor"))?;
        Ok(g.value(p).data().to_vec())
    };
    let truth_features = pool(&fu)?;
    let pred_features = pool(&fv)?;
    let metrics = PairMetrics {
        l1: mean_abs_error(u, v)?,
        l2: mean_squared_error(u, v)?,
        psnr: psnr(u, v)?,
        ssim: ssim(truth, pred, opts.ssim)?,
        lpips: g.value(lp).item()?,
    };
    Ok(PairEvaluation { metrics, truth_features, pred_features })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub id: String,
    /// `Err` holds the reason the row is flagged.
    pub result: std::result::Result<PairMetrics, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub frechet: Option<f64>,
    pub metadata: BTreeMap<String, String>,
}

/// Nine significant digits in plain decimal notation; `inf`/`-inf`/`nan` verbatim.
pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (8 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    // rounding can carry into a new leading digit; one digit fewer keeps nine
    let digits = s.chars().filter(char::is_ascii_digit).collect::<String>();
    let significant = digits.trim_start_matches('0').len();
    if significant > 9 && decimals > 0 {
        format!("{v:.prec$}", prec = decimals - 1)
    } else {
        s
    }
}

impl MetricReport {
    pub fn aggregate(&self) -> Option<PairMetrics> {
        let ok: Vec<&PairMetrics> = self.rows.iter().filter_map(|r| r.result.as_ref().ok()).collect();
        if ok.is_empty() {
            return None;
        }
        let n = ok.len() as f64;
        let mean = |f: fn(&PairMetrics) -> f64| ok.iter().map(|m| f(m)).sum::<f64>() / n;
        Some(PairMetrics {
            l1: mean(|m| m.l1),
            l2: mean(|m| m.l2),
            psnr: mean(|m| m.psnr),
            ssim: mean(|m| m.ssim),
            lpips: mean(|m| m.lpips),
        })
    }

    pub fn flagged(&self) -> impl Iterator<Item = (&str, &str)> {
        self.rows.iter().filter_map(|r| r.result.as_ref().err().map(|e| (r.id.as_str(), e.as_str())))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let line = |out: &mut String, id: &str, vals: [f64; 5]| {
            let cells: Vec<String> = vals.iter().map(|&v| format_value(v)).collect();
            writeln!(out, "{id},{}", cells.join(",")).expect("string write");
        };
        writeln!(out, "{CSV_HEADER}").expect("string write");
        for row in &self.rows {
            let vals = row.result.as_ref().map(PairMetrics::values).unwrap_or([f64::NAN; 5]);
            line(&mut out, &row.id, vals);
        }
        let agg = self.aggregate().map(|m| m.values()).unwrap_or([f64::NAN; 5]);
        line(&mut out, "AGGREGATE", agg);
        writeln!(out, "FID,{}", format_value(self.frechet.unwrap_or(f64::NAN))).expect("string write");
        out
    }

    /// Metadata and flagged rows as `key = "value"` lines.
    pub fn sidecar(&self) -> String {
        let mut table = toml::Table::new();
        for (k, v) in &self.metadata {
            table.insert(k.clone(), toml::Value::String(v.clone()));
        }
        let flagged: toml::Table =
            self.flagged().map(|(id, e)| (id.to_string(), toml::Value::String(e.to_string()))).collect();
        if !flagged.is_empty() {
            table.insert("flagged".into(), toml::Value::Table(flagged));
        }
        toml::to_string(&table).expect("string table serializes")
    }
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|source| crate::image_io::ImageError::Io { path: dir.into(), source })?;
    let mut paths: Vec<PathBuf> = entries.flatten().map(|e| e.path()).collect();
    paths.sort();
    let mut out = BTreeMap::new();
    for path in paths {
        if path.is_file() && is_supported_extension(&path) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
                    log::warn!("{} and {} share the id {stem}; using the latter", prev.display(), path.display());
                }
            }
        }
    }
    Ok(out)
}

/// Evaluates every truth image against the prediction with the same file stem.
///
/// Rows are ordered by id. Unmatched, undecodable or mismatched pairs are
/// flagged and excluded from the aggregate and the Fréchet statistics.
pub fn evaluate_dirs(
    truth_dir: &Path,
    pred_dir: &Path,
    phi: &FeatureExtractor,
    weights: &LpipsWeights,
    opts: EvalOptions,
) -> Result<MetricReport> {
    let truth = list_images(truth_dir)?;
    let pred = list_images(pred_dir)?;
    let mut rows = Vec::with_capacity(truth.len());
    let (mut feats_r, mut feats_g) = (Vec::new(), Vec::new());
    for (id, tpath) in &truth {
        let result = match pred.get(id) {
            None => Err(format!("no prediction for {id}")),
            Some(ppath) => read_rgb(tpath)
                .and_then(|t| read_rgb(ppath).map(|p| (t, p)))
                .map_err(|e| e.to_string())
                .and_then(|(t, p)| evaluate_pair(&t, &p, phi, weights, opts).map_err(|e| e.to_string())),
        };
        let result = result.map(|ev| {
            feats_r.push(ev.truth_features);
            feats_g.push(ev.pred_features);
            ev.metrics
        });
        if let Err(e) = &result {
            log::warn!("row {id} flagged: {e}");
        }
        rows.push(MetricRow { id: id.clone(), result });
    }
    for id in pred.keys().filter(|k| !truth.contains_key(*k)) {
        log::warn!("prediction {id} has no ground truth; ignored");
    }
    let frechet = match (gaussian_stats(&feats_r), gaussian_stats(&feats_g)) {
        (Ok(r), Ok(g)) => match frechet_distance(&r, &g) {
            Ok(d) => Some(d),
            Err(e) => {
                log::warn!("Fréchet distance failed: {e}");
                None
            }
        },
        _ => {
            log::warn!("Fréchet distance needs at least 2 evaluated pairs, have {}", feats_r.len());
            None
        }
    };
    let mut metadata = BTreeMap::new();
    metadata.insert("extractor".into(), phi.describe());
    metadata.insert("ssim".into(), format!("{:?}", opts.ssim).to_lowercase());
    Ok(MetricReport { rows, frechet, metadata })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(format_value(0.04458), "0.0445800000");
        assert_eq!(format_value(22.5052), "22.5052000");
        assert_eq!(format_value(1.0), "1.00000000");
        assert_eq!(format_value(9.999999999), "10.0000000");
        assert_eq!(format_value(123456789012.0), "123456789012");
        assert_eq!(format_value(f64::INFINITY), "inf");
        assert_eq!(format_value(0.0), "0");
    }

    #[test]
    fn csv_layout_with_flagged_row() {
        let m = PairMetrics { l1: 0.5, l2: 0.25, psnr: 6.0, ssim: 0.9, lpips: 0.1 };
        let report = MetricReport {
            rows: vec![
                MetricRow { id: "a".into(), result: Ok(m) },
                MetricRow { id: "b".into(), result: Err("size mismatch".into()) },
            ],
            frechet: Some(0.0),
            metadata: BTreeMap::new(),
        };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[2], "b,nan,nan,nan,nan,nan");
        assert!(lines[3].starts_with("AGGREGATE,0.500000000,"));
        assert_eq!(lines[4], "FID,0");
        assert!(report.sidecar().contains("size mismatch"));
    }
}
