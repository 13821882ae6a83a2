//! Active-learning curves, repetition averaging, p95/c95 indices and plots.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Fraction of the full-training-set mIoU that defines p95 and c95.
pub const TARGET_FRACTION: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: usize,
    pub pixel_frac: f64,
    pub click_frac: f64,
    pub miou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ALCurve {
    pub points: Vec<CurvePoint>,
}

impl ALCurve {
    pub fn new(points: Vec<CurvePoint>) -> Result<Self> {
        let curve = ALCurve { points };
        curve.validate()?;
        Ok(curve)
    }

    /// Fractions must not decrease from one round to the next.
    pub fn validate(&self) -> Result<()> {
        for pair in self.points.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b.round <= a.round || b.pixel_frac < a.pixel_frac || b.click_frac < a.click_frac {
                return Err(Error::Invariant(format!(
                    "curve is not monotone between rounds {} and {}",
                    a.round, b.round
                )));
            }
        }
        if self
            .points
            .iter()
            .any(|p| !(p.pixel_frac.is_finite() && p.click_frac.is_finite() && p.miou.is_finite()))
        {
            return Err(Error::Invariant("curve has non-finite values".into()));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for p in &self.points {
            writer
                .serialize(p)
                .map_err(|e| Error::Data(format!("cannot encode curve: {e}")))?;
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| Error::Data(format!("cannot encode curve: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let points = reader
            .deserialize()
            .collect::<std::result::Result<Vec<CurvePoint>, _>>()
            .map_err(|e| Error::Data(format!("malformed curve csv: {e}")))?;
        ALCurve::new(points)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// Pointwise mean over repetitions. A repetition that stopped early (pool exhausted)
/// is extended with its final point.
pub fn average_curves(curves: &[ALCurve]) -> Result<ALCurve> {
    let len = curves.iter().map(|c| c.points.len()).max().unwrap_or(0);
    if curves.is_empty() || curves.iter().any(|c| c.points.is_empty()) {
        return Err(Error::Data("cannot average empty curves".into()));
    }
    let n = curves.len() as f64;
    let points = (0..len)
        .map(|i| {
            let at = |c: &ALCurve| c.points[i.min(c.points.len() - 1)];
            let sum = |f: fn(&CurvePoint) -> f64| curves.iter().map(|c| f(&at(c))).sum::<f64>() / n;
            CurvePoint {
                round: i,
                pixel_frac: sum(|p| p.pixel_frac),
                click_frac: sum(|p| p.click_frac),
                miou: sum(|p| p.miou),
            }
        })
        .collect();
    ALCurve::new(points)
}

/// First point whose mIoU reaches `target`.
pub fn first_crossing(curve: &ALCurve, target: f64) -> Option<&CurvePoint> {
    curve.points.iter().find(|p| p.miou >= target)
}

/// `None` is written as `"NOT_REACHED"`.
mod reached {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str("NOT_REACHED"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Tag(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(Some(x)),
            Raw::Tag(t) if t == "NOT_REACHED" => Ok(None),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!("unexpected index value {t:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformanceIndex {
    #[serde(with = "reached")]
    pub p95: Option<f64>,
    #[serde(with = "reached")]
    pub c95: Option<f64>,
    pub p100_miou: f64,
    /// Round of the first crossing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<usize>,
}

impl PerformanceIndex {
    /// p95 with "not reached" ordered after every fraction.
    pub fn p95_or_inf(&self) -> f64 {
        self.p95.unwrap_or(f64::INFINITY)
    }

    pub fn c95_or_inf(&self) -> f64 {
        self.c95.unwrap_or(f64::INFINITY)
    }
}

/// Labeled-pixel and click fractions at the first round reaching 95% of `p100_miou`.
pub fn performance_index(curve: &ALCurve, p100_miou: f64) -> PerformanceIndex {
    let hit = first_crossing(curve, TARGET_FRACTION * p100_miou);
    PerformanceIndex {
        p95: hit.map(|p| p.pixel_frac),
        c95: hit.map(|p| p.click_frac),
        p100_miou,
        round: hit.map(|p| p.round),
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn panel(
    svg: &mut String,
    x0: f64,
    title: &str,
    series: &[(String, &ALCurve)],
    x_of: fn(&CurvePoint) -> f64,
    target: Option<f64>,
) {
    let (w, h, pad) = (420.0, 300.0, 45.0);
    let x_max = series
        .iter()
        .flat_map(|(_, c)| c.points.iter().map(x_of))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let (mut y_min, mut y_max) = series
        .iter()
        .flat_map(|(_, c)| c.points.iter().map(|p| p.miou))
        .chain(target)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    if y_max - y_min < 1e-9 {
        y_max = y_min + 1e-3;
    }
    let px = |x: f64| x0 + pad + x / x_max * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - y_min) / (y_max - y_min) * (h - 2.0 * pad);
    let _ = writeln!(
        svg,
        r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#888"/>"##,
        x0 + pad,
        pad,
        w - 2.0 * pad,
        h - 2.0 * pad
    );
    let _ = writeln!(svg, r#"<text x="{:.1}" y="20" font-size="13">{title}</text>"#, x0 + pad);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="10">0</text><text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{x_max:.3}</text>"#,
        x0 + pad,
        h - pad + 14.0,
        x0 + w - pad,
        h - pad + 14.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{y_min:.3}</text><text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{y_max:.3}</text>"#,
        x0 + pad - 4.0,
        h - pad,
        x0 + pad - 4.0,
        pad + 4.0
    );
    if let Some(t) = target {
        let _ = writeln!(
            svg,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#999" stroke-dasharray="4 3"/>"##,
            px(0.0),
            py(t),
            px(x_max),
            py(t)
        );
    }
    for (k, (_, curve)) in series.iter().enumerate() {
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(x_of(p)), py(p.miou)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            PALETTE[k % PALETTE.len()],
            pts.join(" ")
        );
    }
}

/// Two panels: mIoU against labeled-pixel fraction and against click fraction.
pub fn render_svg(series: &[(String, &ALCurve)], p100_miou: Option<f64>) -> String {
    let target = p100_miou.map(|p| p * TARGET_FRACTION);
    let legend_h = 16.0 * series.len() as f64 + 10.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="840" height="{:.0}" font-family="sans-serif">"#,
        300.0 + legend_h
    );
    panel(&mut svg, 0.0, "mIoU vs labeled pixel fraction", series, |p| p.pixel_frac, target);
    panel(&mut svg, 420.0, "mIoU vs click fraction", series, |p| p.click_frac, target);
    for (k, (name, _)) in series.iter().enumerate() {
        let y = 310.0 + 16.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="50" y1="{y:.1}" x2="70" y2="{y:.1}" stroke="{}" stroke-width="2"/><text x="76" y="{:.1}" font-size="11">{}</text>"#,
            PALETTE[k % PALETTE.len()],
            y + 4.0,
            xml_escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(round: usize, pixel: f64, miou: f64) -> CurvePoint {
        CurvePoint {
            round,
            pixel_frac: pixel,
            click_frac: pixel,
            miou,
        }
    }

    #[test]
    fn first_crossing_defines_p95() {
        let curve = ALCurve::new(vec![pt(0, 0.1, 0.50), pt(1, 0.2, 0.58)]).unwrap();
        let idx = performance_index(&curve, 0.60);
        assert_eq!(idx.p95, Some(0.2));
        assert_eq!(idx.round, Some(1));
        let never = performance_index(&curve, 0.70);
        assert_eq!(never.p95, None);
        assert_eq!(never.p95_or_inf(), f64::INFINITY);
    }

    #[test]
    fn not_reached_round_trips() {
        let idx = PerformanceIndex {
            p95: None,
            c95: Some(0.25),
            p100_miou: 0.8,
            round: None,
        };
        let text = serde_json::to_string(&idx).unwrap();
        assert!(text.contains("\"NOT_REACHED\""));
        assert_eq!(serde_json::from_str::<PerformanceIndex>(&text).unwrap(), idx);
    }

    #[test]
    fn averaging_identical_curves_is_identity() {
        let c = ALCurve::new(vec![pt(0, 0.1, 0.3), pt(1, 0.2, 0.4), pt(2, 0.3, 0.45)]).unwrap();
        let avg = average_curves(&[c.clone(), c.clone(), c.clone()]).unwrap();
        assert_eq!(avg.points.len(), c.points.len());
        for (a, b) in avg.points.iter().zip(&c.points) {
            assert_eq!(a.round, b.round);
            assert!((a.pixel_frac - b.pixel_frac).abs() < 1e-12);
            assert!((a.click_frac - b.click_frac).abs() < 1e-12);
            assert!((a.miou - b.miou).abs() < 1e-12);
        }
    }

    #[test]
    fn averaging_pads_short_curves() {
        let long = ALCurve::new(vec![pt(0, 0.5, 0.2), pt(1, 1.0, 0.4)]).unwrap();
        let short = ALCurve::new(vec![pt(0, 1.0, 0.6)]).unwrap();
        let avg = average_curves(&[long, short]).unwrap();
        assert_eq!(avg.points.len(), 2);
        assert!((avg.points[1].miou - 0.5).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_and_header() {
        let c = ALCurve::new(vec![pt(0, 0.1, 0.3), pt(1, 0.25, 0.5)]).unwrap();
        let text = c.to_csv().unwrap();
        assert!(text.starts_with("round,pixel_frac,click_frac,miou\n"));
        assert_eq!(ALCurve::from_csv(&text).unwrap(), c);
    }

    #[test]
    fn rejects_non_monotone() {
        assert!(ALCurve::new(vec![pt(0, 0.3, 0.3), pt(1, 0.2, 0.5)]).is_err());
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let c = ALCurve::new(vec![pt(0, 0.1, 0.3), pt(1, 0.25, 0.5)]).unwrap();
        let svg = render_svg(&[("a<b".into(), &c)], Some(0.6));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a&lt;b"));
    }
}
