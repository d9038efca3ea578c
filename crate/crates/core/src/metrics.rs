//! Region overlap and boundary distance metrics, and the per-view report.

use std::fmt::Write as _;

use crate::data::View;
use crate::error::{invalid, Error, Result};
use crate::mask::BinaryMask;

/// `|P and T| / |P or T|`; two empty masks score 1.
pub fn iou(p: &BinaryMask, t: &BinaryMask) -> Result<f64> {
    p.same_dims(t)?;
    let inter = p.intersection_count(t);
    let union = p.area() + t.area() - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `2 |P and T| / (|P| + |T|)`; two empty masks score 1.
pub fn dice_coef(p: &BinaryMask, t: &BinaryMask) -> Result<f64> {
    p.same_dims(t)?;
    let total = p.area() + t.area();
    Ok(if total == 0 { 1.0 } else { 2.0 * p.intersection_count(t) as f64 / total as f64 })
}

/// Foreground pixels with a 4-neighbour that is background or outside the
/// image, in row-major order.
pub fn extract_boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    mask.foreground()
        .filter(|&(y, x)| {
            let (y, x) = (y as isize, x as isize);
            [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| !mask.get_or_bg(y + dy, x + dx))
        })
        .collect()
}

/// Squared distance from every pixel to the nearest of `sites`, computed
/// with the separable lower-envelope transform. Entries with no site in
/// reach are `f64::INFINITY`. All finite results are exact integers.
pub fn squared_distance_field(h: usize, w: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    let mut is_site = vec![false; h * w];
    for &(y, x) in sites {
        is_site[y * w + x] = true;
    }
    // Columns first.
    let mut cols = vec![f64::INFINITY; h * w];
    let mut line = Vec::with_capacity(h.max(w));
    let mut out = vec![0.0; h.max(w)];
    for x in 0..w {
        line.clear();
        line.extend((0..h).filter(|&y| is_site[y * w + x]).map(|y| (y, 0.0)));
        lower_envelope(&line, h, &mut out[..h]);
        for y in 0..h {
            cols[y * w + x] = out[y];
        }
    }
    let mut field = vec![f64::INFINITY; h * w];
    for y in 0..h {
        let row = &cols[y * w..(y + 1) * w];
        line.clear();
        line.extend(row.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(x, &v)| (x, v)));
        lower_envelope(&line, w, &mut out[..w]);
        field[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    field
}

/// `out[q] = min over (p, f) in sites of (q - p)^2 + f`.
fn lower_envelope(sites: &[(usize, f64)], n: usize, out: &mut [f64]) {
    if sites.is_empty() {
        out[..n].fill(f64::INFINITY);
        return;
    }
    let key = |(p, f): (usize, f64)| f + (p * p) as f64;
    let mut hull: Vec<(usize, f64)> = Vec::with_capacity(sites.len());
    let mut starts: Vec<f64> = Vec::with_capacity(sites.len());
    for &site in sites {
        loop {
            let Some(&last) = hull.last() else {
                hull.push(site);
                starts.push(f64::NEG_INFINITY);
                break;
            };
            let s = (key(site) - key(last)) / (2.0 * (site.0 as f64 - last.0 as f64));
            if s <= *starts.last().expect("parallel to hull") {
                hull.pop();
                starts.pop();
            } else {
                hull.push(site);
                starts.push(s);
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out[..n].iter_mut().enumerate() {
        while k + 1 < hull.len() && starts[k + 1] < q as f64 {
            k += 1;
        }
        let (p, f) = hull[k];
        let d = q.abs_diff(p);
        *o = (d * d) as f64 + f;
    }
}

/// Directed boundary distances of both masks: first each boundary pixel of
/// `p` to the boundary of `t`, then each boundary pixel of `t` to that of `p`.
pub fn pooled_boundary_distances(p: &BinaryMask, t: &BinaryMask) -> Result<Vec<f64>> {
    p.same_dims(t)?;
    if p.is_empty() || t.is_empty() {
        return Err(Error::UndefinedMetric("surface distance needs two non-empty masks".into()));
    }
    let (h, w) = (p.height(), p.width());
    let bp = extract_boundary(p);
    let bt = extract_boundary(t);
    let to_t = squared_distance_field(h, w, &bt);
    let to_p = squared_distance_field(h, w, &bp);
    let mut out = Vec::with_capacity(bp.len() + bt.len());
    out.extend(bp.iter().map(|&(y, x)| to_t[y * w + x].sqrt()));
    out.extend(bt.iter().map(|&(y, x)| to_p[y * w + x].sqrt()));
    Ok(out)
}

/// Average symmetric surface distance in pixels.
pub fn asd(p: &BinaryMask, t: &BinaryMask) -> Result<f64> {
    let d = pooled_boundary_distances(p, t)?;
    Ok(mean_in_order(&d))
}

/// 95th percentile of the pooled boundary distances.
pub fn hd95(p: &BinaryMask, t: &BinaryMask) -> Result<f64> {
    let mut d = pooled_boundary_distances(p, t)?;
    d.sort_by(f64::total_cmp);
    percentile_linear(&d, 0.95)
}

fn mean_in_order(d: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &v in d {
        acc += v;
    }
    acc / d.len() as f64
}

/// Percentile of sorted data by linear interpolation at rank `q (n - 1)`.
pub fn percentile_linear(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(invalid!("percentile of empty data"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid!("percentile rank {q} outside [0, 1]"));
    }
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub view: View,
    pub iou: f64,
    pub dice: f64,
    /// `None` when either mask is empty.
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
}

impl ImageMetrics {
    pub fn compute(id: impl Into<String>, view: View, pred: &BinaryMask, truth: &BinaryMask) -> Result<Self> {
        let distances = match pooled_boundary_distances(pred, truth) {
            Ok(mut d) => {
                let a = mean_in_order(&d);
                d.sort_by(f64::total_cmp);
                Some((a, percentile_linear(&d, 0.95)?))
            }
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            id: id.into(),
            view,
            iou: iou(pred, truth)?,
            dice: dice_coef(pred, truth)?,
            asd: distances.map(|d| d.0),
            hd95: distances.map(|d| d.1),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanMetrics {
    pub count: usize,
    pub iou: f64,
    pub dice: f64,
    /// Mean over the records where the distance is defined.
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
}

impl MeanMetrics {
    fn over<'a>(records: impl Iterator<Item = &'a ImageMetrics> + Clone) -> Self {
        let mean = |vals: Vec<f64>| {
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        let count = records.clone().count();
        Self {
            count,
            iou: mean(records.clone().map(|r| r.iou).collect()).unwrap_or(f64::NAN),
            dice: mean(records.clone().map(|r| r.dice).collect()).unwrap_or(f64::NAN),
            asd: mean(records.clone().filter_map(|r| r.asd).collect()),
            hd95: mean(records.filter_map(|r| r.hd95).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Sorted by `(id, view)`.
    pub records: Vec<ImageMetrics>,
    /// Views present in the records, in canonical view order.
    pub per_view: Vec<(View, MeanMetrics)>,
    pub overall: MeanMetrics,
}

impl MetricsReport {
    pub fn from_records(mut records: Vec<ImageMetrics>) -> Result<Self> {
        if records.is_empty() {
            return Err(invalid!("cannot summarise an empty evaluation"));
        }
        records.sort_by(|a, b| a.id.cmp(&b.id).then(a.view.cmp(&b.view)));
        let per_view = View::ALL
            .iter()
            .filter(|v| records.iter().any(|r| r.view == **v))
            .map(|&v| (v, MeanMetrics::over(records.iter().filter(move |r| r.view == v))))
            .collect();
        let overall = MeanMetrics::over(records.iter());
        Ok(Self { records, per_view, overall })
    }

    pub fn view(&self, view: View) -> Option<&MeanMetrics> {
        self.per_view.iter().find(|(v, _)| *v == view).map(|(_, m)| m)
    }

    /// `id,view,iou,dice,asd,hd95` rows followed by `# mean,...` lines per
    /// view and overall. Undefined distances are written as `NA`.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        let mut s = String::from("id,view,iou,dice,asd,hd95\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{:.6},{:.6},{},{}", r.id, r.view, r.iou, r.dice, opt(r.asd), opt(r.hd95));
        }
        let mut trailer = |name: &str, m: &MeanMetrics| {
            let _ = writeln!(s, "# mean,{name},{:.6},{:.6},{},{}", m.iou, m.dice, opt(m.asd), opt(m.hd95));
        };
        for (v, m) in &self.per_view {
            trailer(v.as_str(), m);
        }
        trailer("all", &self.overall);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(y0: usize, x0: usize, side: usize, size: usize) -> BinaryMask {
        BinaryMask::from_fn(size, size, |y, x| (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x))
    }

    #[test]
    fn shifted_square_overlap() {
        let a = square(1, 1, 2, 5);
        let b = square(1, 2, 2, 5);
        assert_eq!(iou(&a, &b).unwrap(), 1.0 / 3.0);
        assert_eq!(dice_coef(&a, &b).unwrap(), 0.5);
        let empty = BinaryMask::new(5, 5);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(iou(&a, &square(3, 3, 2, 5)).unwrap(), 0.0);
    }

    #[test]
    fn boundary_examples() {
        assert_eq!(extract_boundary(&square(2, 2, 1, 5)), vec![(2, 2)]);
        assert_eq!(extract_boundary(&square(1, 1, 3, 5)).len(), 8);
        assert!(extract_boundary(&BinaryMask::new(4, 4)).is_empty());
        assert_eq!(extract_boundary(&square(0, 0, 4, 4)).len(), 12);
    }

    #[test]
    fn point_distances() {
        let a = BinaryMask::from_fn(1, 4, |_, x| x == 0);
        let b = BinaryMask::from_fn(1, 4, |_, x| x == 3);
        assert_eq!(asd(&a, &b).unwrap(), 3.0);
        assert_eq!(hd95(&a, &b).unwrap(), 3.0);
        assert_eq!(asd(&a, &a).unwrap(), 0.0);
        assert!(matches!(asd(&a, &BinaryMask::new(1, 4)), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn distance_field_matches_scan() {
        let sites: [(usize, usize); 3] = [(0, 0), (3, 5), (6, 1)];
        let field = squared_distance_field(7, 6, &sites);
        for y in 0..7usize {
            for x in 0..6usize {
                let best = sites.iter().map(|&(sy, sx)| y.abs_diff(sy).pow(2) + x.abs_diff(sx).pow(2)).min().unwrap();
                assert_eq!(field[y * 6 + x], best as f64);
            }
        }
        assert!(squared_distance_field(3, 3, &[]).iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn percentile_interpolates() {
        let d = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile_linear(&d, 0.5).unwrap(), 2.0);
        assert!((percentile_linear(&d, 0.95).unwrap() - 3.8).abs() < 1e-12);
        assert_eq!(percentile_linear(&[7.0], 0.95).unwrap(), 7.0);
    }

    #[test]
    fn report_groups_and_orders() {
        let r = |id: &str, view, iou, asd| ImageMetrics {
            id: id.into(),
            view,
            iou,
            dice: 2.0 * iou / (1.0 + iou),
            asd,
            hd95: asd,
        };
        let report = MetricsReport::from_records(vec![
            r("b", View::Coronal, 0.5, Some(2.0)),
            r("a", View::LeftBending, 1.0, Some(0.0)),
            r("a", View::Coronal, 0.9, None),
        ])
        .unwrap();
        assert_eq!(report.records[0].id, "a");
        assert_eq!(report.records[0].view, View::Coronal);
        let coronal = report.view(View::Coronal).unwrap();
        assert!((coronal.iou - 0.7).abs() < 1e-12);
        assert_eq!(coronal.asd, Some(2.0));
        assert!(report.view(View::RightBending).is_none());
        let csv = report.to_csv();
        assert!(csv.starts_with("id,view,iou,dice,asd,hd95\n"));
        assert!(csv.contains(",NA,NA\n"));
        assert!(csv.contains("# mean,all,"));
        assert!(MetricsReport::from_records(vec![]).is_err());
    }
}
