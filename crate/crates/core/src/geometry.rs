//! Boxes in normalized center-size form, GIoU, sinusoidal box encodings and the
//! five-way human/object spatial relation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Axis-aligned box `(cx, cy, w, h)` in image-normalized coordinates, y pointing down.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { cx, cy, w, h };
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::Domain(format!("non-finite box {b:?}")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Domain(format!("degenerate box {b:?}")));
        }
        Ok(b)
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        BBox::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match *v {
            [cx, cy, w, h] => BBox::new(cx, cy, w, h),
            _ => Err(Error::Contract(format!("a box needs 4 values, got {}", v.len()))),
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Clips the box to the unit square; fails if nothing is left.
    pub fn clamped(&self) -> Result<Self> {
        let c = |v: f64| v.clamp(0.0, 1.0);
        BBox::from_corners(c(self.x0()), c(self.y0()), c(self.x1()), c(self.y1()))
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x1().min(other.x1()) - self.x0().max(other.x0())).max(0.0);
        let h = (self.y1().min(other.y1()) - self.y0().max(other.y0())).max(0.0);
        w * h
    }
}

/// GIoU of two boxes, in `[-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !(bx.area() > 0.0) {
            return Err(Error::Domain(format!("zero-area box {bx:?}")));
        }
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let hull = (a.x1().max(b.x1()) - a.x0().min(b.x0())) * (a.y1().max(b.y1()) - a.y0().min(b.y0()));
    Ok(inter / union - (hull - union) / hull)
}

/// Differentiable GIoU between box tensors of shape `(..., 4)`; returns shape `(...)`.
pub fn giou_graph(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) || g.shape(a).last() != Some(&4) {
        return Err(Error::shape("giou_graph", g.shape(a), g.shape(b)));
    }
    if g.value(a).data().chunks(4).chain(g.value(b).data().chunks(4)).any(|c| !(c[2] > 0.0 && c[3] > 0.0)) {
        return Err(Error::Domain("zero-area box in giou".into()));
    }
    let axis = g.shape(a).len() - 1;
    let corners = |g: &mut Graph, x: Var| -> Result<(Var, Var, Var, Var)> {
        let c = g.narrow(x, axis, 0, 2)?;
        let s = g.narrow(x, axis, 2, 2)?;
        let half = g.mul_scalar(s, 0.5);
        let lo = g.sub(c, half)?;
        let hi = g.add(c, half)?;
        let x0 = g.narrow(lo, axis, 0, 1)?;
        let y0 = g.narrow(lo, axis, 1, 1)?;
        let x1 = g.narrow(hi, axis, 0, 1)?;
        let y1 = g.narrow(hi, axis, 1, 1)?;
        Ok((x0, y0, x1, y1))
    };
    let (ax0, ay0, ax1, ay1) = corners(g, a)?;
    let (bx0, by0, bx1, by1) = corners(g, b)?;
    let area = |g: &mut Graph, x: Var| -> Result<Var> {
        let w = g.narrow(x, axis, 2, 1)?;
        let h = g.narrow(x, axis, 3, 1)?;
        g.mul(w, h)
    };
    let area_a = area(g, a)?;
    let area_b = area(g, b)?;

    let ix1 = g.minimum(ax1, bx1)?;
    let ix0 = g.maximum(ax0, bx0)?;
    let iy1 = g.minimum(ay1, by1)?;
    let iy0 = g.maximum(ay0, by0)?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy1, iy0)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let sum = g.add(area_a, area_b)?;
    let union = g.sub(sum, inter)?;

    let hx1 = g.maximum(ax1, bx1)?;
    let hx0 = g.minimum(ax0, bx0)?;
    let hy1 = g.maximum(ay1, by1)?;
    let hy0 = g.minimum(ay0, by0)?;
    let hw = g.sub(hx1, hx0)?;
    let hh = g.sub(hy1, hy0)?;
    let hull = g.mul(hw, hh)?;

    let iou = g.div(inter, union)?;
    let gap = g.sub(hull, union)?;
    let penalty = g.div(gap, hull)?;
    let out = g.sub(iou, penalty)?;
    let mut shape = g.shape(a).to_vec();
    shape.pop();
    if shape.is_empty() {
        return g.reshape(out, &[]);
    }
    g.reshape(out, &shape)
}

pub const PE_TEMPERATURE: f64 = 10000.0;
pub const PE_SCALE: f64 = 2.0 * std::f64::consts::PI;

/// Frequency ladder `f_k = T^{-k / (dims/8)}`, one entry per sin/cos pair of a coordinate.
pub fn pe_frequencies(dims: usize) -> Result<Vec<f64>> {
    if dims == 0 || dims % 8 != 0 {
        return Err(Error::Config(format!("box encoding width must be a positive multiple of 8, got {dims}")));
    }
    let pairs = dims / 8;
    Ok((0..pairs).map(|k| PE_TEMPERATURE.powf(-(k as f64) / pairs as f64)).collect())
}

/// Sinusoidal encoding of `(cx, cy, w, h)`: for each coordinate in turn,
/// `[sin(s·f_0·c), cos(s·f_0·c), sin(s·f_1·c), cos(s·f_1·c), ...]`.
pub fn box_pe(b: &BBox, dims: usize) -> Result<Vec<f64>> {
    let freqs = pe_frequencies(dims)?;
    Ok(encode(&b.to_array(), &freqs))
}

fn encode(coords: &[f64], freqs: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(coords.len() * freqs.len() * 2);
    for &c in coords {
        for &f in freqs {
            let t = PE_SCALE * f * c;
            out.push(t.sin());
            out.push(t.cos());
        }
    }
    out
}

/// Row-wise [`box_pe`] of an `(N, 4)` box tensor. Rows need not be valid boxes.
pub fn box_pe_rows(boxes: &Tensor, dims: usize) -> Result<Tensor> {
    if boxes.rank() != 2 || boxes.shape()[1] != 4 {
        return Err(Error::shape("box_pe_rows", boxes.shape(), &[boxes.shape()[0], 4]));
    }
    let freqs = pe_frequencies(dims)?;
    let data = boxes.data().chunks(4).flat_map(|r| encode(r, &freqs)).collect();
    Tensor::new(vec![boxes.shape()[0], dims], data)
}

/// [`box_pe_rows`] on the tape, differentiable in the box coordinates.
pub fn box_pe_graph(g: &mut Graph, boxes: Var, dims: usize) -> Result<Var> {
    let shape = g.shape(boxes).to_vec();
    if shape.len() != 2 || shape[1] != 4 {
        return Err(Error::shape("box_pe_graph", &shape, &[shape.first().copied().unwrap_or(0), 4]));
    }
    let freqs = pe_frequencies(dims)?;
    let f = freqs.len();
    let scaled = g.constant(Tensor::new(vec![1, 1, f], freqs.iter().map(|x| PE_SCALE * x).collect())?);
    let e = g.expand(boxes, 2, f)?;
    let t = g.mul(e, scaled)?;
    let (sin, cos) = (g.sin(t), g.cos(t));
    let (sin, cos) = (g.unsqueeze(sin, 3)?, g.unsqueeze(cos, 3)?);
    let pairs = g.concat(&[sin, cos], 3)?;
    g.reshape(pairs, &[shape[0], dims])
}

/// Lipschitz constant of [`box_pe`] with respect to the Euclidean norm on box coordinates.
pub fn box_pe_lipschitz(dims: usize) -> Result<f64> {
    let freqs = pe_frequencies(dims)?;
    Ok(PE_SCALE * freqs.iter().map(|f| f * f).sum::<f64>().sqrt())
}

/// Position of an object relative to a human.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Above,
    Below,
    Around,
    Within,
    Containing,
}

impl Relation {
    pub const ALL: [Relation; 5] = [
        Relation::Above,
        Relation::Below,
        Relation::Around,
        Relation::Within,
        Relation::Containing,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::Around => "around",
            Relation::Within => "within",
            Relation::Containing => "containing",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Relation::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Vocabulary(format!("unknown relation `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelationThresholds {
    /// Fraction of a box's area that must lie inside the other for within/containing.
    pub inside: f64,
    /// Vertical offset, in human heights, beyond the human's top/bottom edge for above/below.
    pub vertical: f64,
}

impl Default for RelationThresholds {
    fn default() -> Self {
        RelationThresholds {
            inside: 0.98,
            vertical: 0.25,
        }
    }
}

/// Ordered decision table: within, containing, above, below, otherwise around.
///
/// When both boxes are each almost entirely inside the other, the smaller one is
/// taken to be inside, so swapping the arguments swaps within and containing.
pub fn classify_relation(human: &BBox, object: &BBox, t: &RelationThresholds) -> Relation {
    let inter = human.intersection_area(object);
    let object_inside = inter >= t.inside * object.area();
    let human_inside = inter >= t.inside * human.area();
    match (object_inside, human_inside) {
        (true, true) if object.area() > human.area() => return Relation::Containing,
        (true, _) => return Relation::Within,
        (false, true) => return Relation::Containing,
        _ => {}
    }
    let overlaps_x = human.x1().min(object.x1()) > human.x0().max(object.x0());
    if overlaps_x && object.cy < human.y0() - t.vertical * human.h {
        Relation::Above
    } else if overlaps_x && object.cy > human.y1() + t.vertical * human.h {
        Relation::Below
    } else {
        Relation::Around
    }
}
