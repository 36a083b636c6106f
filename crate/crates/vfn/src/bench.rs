//! Benchmark harness: annotation files in, per-set cropping metrics out.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vfn_core::eval::{evaluate_image, Aggregates, BenchRow, ProtocolConfig};
use vfn_core::geometry::CropRect;
use vfn_core::search::WindowScorer;

use crate::io::{load_image, read_to_string};
use crate::{Error, Result};

/// One annotated image; `crop` is `[x, y, w, h]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image: String,
    pub crop: [u32; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl Annotation {
    pub fn rect(&self) -> Result<CropRect> {
        let [x, y, w, h] = self.crop;
        Ok(CropRect::new(x, y, w, h)?)
    }
}

/// Annotations with the directory their image paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub name: String,
    pub base: PathBuf,
    pub annotations: Vec<Annotation>,
}

impl AnnotationSet {
    /// Reads a JSON array of annotations; the set is named after the file.
    pub fn read(path: &Path) -> Result<Self> {
        let annotations: Vec<Annotation> =
            serde_json::from_str(&read_to_string(path)?).map_err(|e| Error::format(path, e))?;
        for a in &annotations {
            a.rect()
                .map_err(|e| Error::format(path, format!("{}: {e}", a.image)))?;
        }
        Ok(Self {
            name: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            annotations,
        })
    }

    pub fn to_json(annotations: &[Annotation]) -> String {
        serde_json::to_string_pretty(annotations).expect("annotations serialize") + "\n"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowReport {
    pub index: usize,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub chosen: [u32; 4],
    pub ground_truth: [u32; 4],
    pub score: f64,
    pub iou: f64,
    pub displacement: f64,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub name: String,
    pub annotated: usize,
    pub evaluated: usize,
    pub missing: Vec<String>,
    pub mean_iou: Option<f64>,
    pub mean_displacement: Option<f64>,
    pub alpha_recall: Option<f64>,
    pub rows: Vec<RowReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolEcho {
    pub scales: Vec<f64>,
    pub grid: [u32; 2],
    pub alpha: f64,
    pub include_ground_truth: bool,
}

impl From<&ProtocolConfig> for ProtocolEcho {
    fn from(p: &ProtocolConfig) -> Self {
        Self {
            scales: p.scales.clone(),
            grid: [p.grid.0, p.grid.1],
            alpha: p.alpha,
            include_ground_truth: p.include_ground_truth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub protocol: ProtocolEcho,
    pub sets: Vec<SetReport>,
}

fn rect_array(r: &CropRect) -> [u32; 4] {
    [r.x, r.y, r.w, r.h]
}

/// Evaluates each set separately. Images that cannot be loaded are listed
/// as missing and left out of the aggregates.
pub fn run_benchmark<S: WindowScorer + Sync + ?Sized>(
    sets: &[AnnotationSet],
    scorer: &S,
    protocol: &ProtocolConfig,
) -> Result<BenchReport> {
    let mut reports = Vec::with_capacity(sets.len());
    for set in sets {
        let outcomes: Vec<Result<Option<BenchRow>>> = set
            .annotations
            .par_iter()
            .enumerate()
            .map(|(i, a)| {
                let path = set.base.join(&a.image);
                let img = match load_image(&path) {
                    Ok(img) => img,
                    Err(e) => {
                        warn!("{}: {e}", set.name);
                        return Ok(None);
                    }
                };
                Ok(Some(evaluate_image(i, &img, a.rect()?, scorer, protocol)?))
            })
            .collect();

        let mut rows = Vec::new();
        let mut core_rows = Vec::new();
        let mut missing = Vec::new();
        for (a, outcome) in set.annotations.iter().zip(outcomes) {
            match outcome? {
                Some(row) => {
                    rows.push(RowReport {
                        index: row.index,
                        image: a.image.clone(),
                        category: a.category.clone(),
                        chosen: rect_array(&row.chosen),
                        ground_truth: rect_array(&row.ground_truth),
                        score: row.score,
                        iou: row.iou,
                        displacement: row.displacement,
                        hit: row.hit,
                    });
                    core_rows.push(row);
                }
                None => missing.push(a.image.clone()),
            }
        }
        let agg = (!core_rows.is_empty())
            .then(|| Aggregates::from_rows(&core_rows, protocol.alpha))
            .transpose()?;
        reports.push(SetReport {
            name: set.name.clone(),
            annotated: set.annotations.len(),
            evaluated: rows.len(),
            missing,
            mean_iou: agg.map(|a| a.mean_iou),
            mean_displacement: agg.map(|a| a.mean_displacement),
            alpha_recall: agg.map(|a| a.alpha_recall),
            rows,
        });
    }
    Ok(BenchReport {
        protocol: protocol.into(),
        sets: reports,
    })
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Aligned summary with one line per annotation set.
    pub fn to_table(&self) -> String {
        let fmt =
            |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |v| format!("{v:.digits$}"));
        let rows: Vec<[String; 6]> = self
            .sets
            .iter()
            .map(|s| {
                [
                    s.name.clone(),
                    s.evaluated.to_string(),
                    s.missing.len().to_string(),
                    fmt(s.mean_iou, 4),
                    fmt(s.mean_displacement, 4),
                    fmt(s.alpha_recall, 2),
                ]
            })
            .collect();
        let header = [
            "Set".to_string(),
            "Images".to_string(),
            "Missing".to_string(),
            "IoU".to_string(),
            "Disp.".to_string(),
            format!("{}-recall", self.protocol.alpha),
        ];
        let mut widths = header.clone().map(|h| h.len());
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        for line in std::iter::once(&header).chain(&rows) {
            for (i, (cell, w)) in line.iter().zip(widths).enumerate() {
                if i == 0 {
                    let _ = write!(out, "{cell:<w$}");
                } else {
                    let _ = write!(out, "  {cell:>w$}");
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::save_png;
    use vfn_core::eval::iou;
    use vfn_core::imaging::ImageBuffer;
    use vfn_core::search::FnScorer;

    fn fixture(dir: &Path) -> AnnotationSet {
        save_png(&ImageBuffer::filled(120, 80, [0.3; 3]), &dir.join("a.png")).unwrap();
        save_png(&ImageBuffer::filled(90, 90, [0.6; 3]), &dir.join("b.png")).unwrap();
        let annotations = vec![
            Annotation {
                image: "a.png".into(),
                crop: [10, 5, 70, 50],
                category: Some("street".into()),
            },
            Annotation {
                image: "gone.png".into(),
                crop: [0, 0, 10, 10],
                category: None,
            },
            Annotation {
                image: "b.png".into(),
                crop: [20, 20, 60, 60],
                category: None,
            },
        ];
        let path = dir.join("set1.json");
        std::fs::write(&path, AnnotationSet::to_json(&annotations)).unwrap();
        AnnotationSet::read(&path).unwrap()
    }

    #[test]
    fn oracle_scorer_is_perfect_and_missing_images_are_counted() {
        let dir = tempfile::tempdir().unwrap();
        let set = fixture(dir.path());
        assert_eq!(set.name, "set1");
        let lookup: Vec<(String, CropRect)> = set
            .annotations
            .iter()
            .map(|a| (a.image.clone(), a.rect().unwrap()))
            .collect();
        let oracle = FnScorer(move |img: &ImageBuffer, r: CropRect| {
            let gt = if img.width() == 120 {
                lookup[0].1
            } else {
                lookup[2].1
            };
            iou(&gt, &r)
        });
        let report = run_benchmark(&[set], &oracle, &ProtocolConfig::default()).unwrap();
        let s = &report.sets[0];
        assert_eq!((s.annotated, s.evaluated), (3, 2));
        assert_eq!(s.missing, vec!["gone.png"]);
        assert_eq!(
            (s.mean_iou, s.mean_displacement, s.alpha_recall),
            (Some(1.0), Some(0.0), Some(100.0))
        );
        assert_eq!(s.rows[0].category.as_deref(), Some("street"));
        assert_eq!(s.rows[1].index, 2);
    }

    #[test]
    fn aggregates_match_row_recomputation_and_report_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let set = fixture(dir.path());
        let constant = FnScorer(|_: &ImageBuffer, _: CropRect| 0.0);
        let a = run_benchmark(
            &[set.clone(), set.clone()],
            &constant,
            &ProtocolConfig::default(),
        )
        .unwrap();
        let b = run_benchmark(&[set.clone(), set], &constant, &ProtocolConfig::default()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.sets.len(), 2);
        let s = &a.sets[0];
        let n = s.rows.len() as f64;
        let mean: f64 = s.rows.iter().map(|r| r.iou).sum::<f64>() / n;
        assert_eq!(s.mean_iou, Some(mean));
        let recall = 100.0 * s.rows.iter().filter(|r| r.iou > 0.75).count() as f64 / n;
        assert_eq!(s.alpha_recall, Some(recall));
        for r in &s.rows {
            assert_eq!(&r.chosen[..2], &[0, 0]);
        }
        let parsed: BenchReport = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(parsed, a);
    }

    #[test]
    fn table_is_aligned() {
        let dir = tempfile::tempdir().unwrap();
        let set = fixture(dir.path());
        let constant = FnScorer(|_: &ImageBuffer, _: CropRect| 0.0);
        let table = run_benchmark(&[set], &constant, &ProtocolConfig::default())
            .unwrap()
            .to_table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(
            lines[0].contains("IoU")
                && lines[0].contains("Disp.")
                && lines[0].contains("0.75-recall")
        );
        assert_eq!(lines[0].len(), lines[1].len());
    }
}
