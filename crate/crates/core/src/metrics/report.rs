use serde::Serialize;

/// Metrics for one evaluated item. Fields are `None` when not applicable;
/// `error` records why an item could not be evaluated.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricRow {
    pub name: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub absrel: Option<f64>,
    pub delta1: Option<f64>,
    pub depth_loss: Option<f64>,
    pub error: Option<String>,
}

impl MetricRow {
    pub fn named(name: impl Into<String>) -> Self {
        MetricRow {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn failed(name: impl Into<String>, error: impl Into<String>) -> Self {
        MetricRow {
            name: name.into(),
            error: Some(error.into()),
            ..Default::default()
        }
    }
}

/// Per-item rows plus per-metric means over the rows where each is present.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
}

impl MetricReport {
    pub fn new(rows: Vec<MetricRow>) -> Self {
        let avg = |f: fn(&MetricRow) -> Option<f64>| {
            let v: Vec<f64> = rows.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let mean = MetricRow {
            name: "mean".into(),
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            absrel: avg(|r| r.absrel),
            delta1: avg(|r| r.delta1),
            depth_loss: avg(|r| r.depth_loss),
            error: None,
        };
        MetricReport { rows, mean }
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// CSV with one line per row followed by the mean line.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            w.serialize(r).expect("row serialises");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 csv")
    }
}
