//! Procedural scenes: motifs placed on a lattice, rendered with per-pixel
//! instance ids so ground truth is the exact visible extent of each motif.

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::annotation::{PatternAnnotation, SampleAnnotation};
use crate::boxes::BoxXYWH;
use crate::error::{arg_err, Result, TmrError};

/// Smallest allowed box side as a fraction of the shorter image side.
pub const MIN_BOX_FRACTION: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Lattice {
    Square,
    Hex,
    FriezeRow,
    Scattered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotifFamily {
    Disc,
    Ring,
    /// Two sub-elements side by side; swapping them gives a new pattern.
    Bigram,
    Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub lattice: Lattice,
    /// Maximum center displacement as a fraction of the lattice pitch.
    pub jitter: f64,
    pub motif: MotifFamily,
    /// Motif (or bigram element) size range, as fractions of the shorter side.
    pub motif_size: [f64; 2],
    /// Per-instance size factor is drawn from `1 +- scale_var`.
    pub scale_var: f64,
    /// Per-instance color offset, as a fraction of full range.
    pub color_var: f64,
    /// Pitch range as a multiple of the largest motif extent.
    pub spacing: [f64; 2],
    /// Unannotated clutter shapes per 100x100 pixels.
    pub distractor_density: f64,
    pub patterns: usize,
    /// Lower bound on placed instances (raised to `patterns` if smaller).
    #[serde(default)]
    pub min_instances: usize,
    pub max_instances: usize,
    pub exemplars: usize,
    /// Force `[rows, cols]` for square and hex lattices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice_dims: Option<[usize; 2]>,
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return arg_err(format!(
                "image must be at least 16x16, got {}x{}",
                self.width, self.height
            ));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return arg_err(format!("jitter must lie in [0, 0.5), got {}", self.jitter));
        }
        if !(1..=3).contains(&self.patterns) {
            return arg_err(format!(
                "patterns per image must be 1..=3, got {}",
                self.patterns
            ));
        }
        let [lo, hi] = self.motif_size;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return arg_err(format!(
                "motif_size must satisfy 0 < min <= max < 1, got {lo}, {hi}"
            ));
        }
        if !(0.0..0.5).contains(&self.scale_var) {
            return arg_err(format!(
                "scale_var must lie in [0, 0.5), got {}",
                self.scale_var
            ));
        }
        if lo * (1.0 - self.scale_var) < MIN_BOX_FRACTION {
            return arg_err("smallest motif would violate the minimum box size");
        }
        if !(0.0..=1.0).contains(&self.color_var) {
            return arg_err(format!(
                "color_var must lie in [0, 1], got {}",
                self.color_var
            ));
        }
        let [s_lo, s_hi] = self.spacing;
        if !(s_lo >= 1.0 && s_lo <= s_hi) {
            return arg_err(format!(
                "spacing must satisfy 1 <= min <= max, got {s_lo}, {s_hi}"
            ));
        }
        if !(self.distractor_density >= 0.0 && self.distractor_density.is_finite()) {
            return arg_err("distractor_density must be non-negative");
        }
        if self.max_instances < self.patterns.max(self.min_instances) {
            return arg_err("max_instances is below the required instance count");
        }
        if self.exemplars == 0 {
            return arg_err("at least one exemplar per pattern is required");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Disc,
    Ring,
    Square,
    Triangle,
    Cross,
    /// 4x4 two-tone checker given by a bit mask.
    Texture(u16),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Element {
    pub shape: Shape,
    pub color: [f64; 3],
    pub alt: [f64; 3],
}

/// One pattern: a single element or an ordered pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Motif {
    pub first: Element,
    pub second: Option<Element>,
    /// Element side in pixels.
    pub size: f64,
}

const PAIR_GAP: f64 = 0.25;

impl Motif {
    pub fn extent(&self, scale: f64) -> (f64, f64) {
        let s = self.size * scale;
        match self.second {
            Some(_) => (s * (2.0 + PAIR_GAP), s),
            None => (s, s),
        }
    }

    /// The same elements in the opposite order.
    pub fn reflected(&self) -> Self {
        match self.second {
            Some(second) => Self {
                first: second,
                second: Some(self.first),
                size: self.size,
            },
            None => *self,
        }
    }
}

/// Whether normalized element coordinates `(u, v)` in `[-1, 1]^2` are
/// covered, and by which of the two tones.
fn coverage(shape: Shape, u: f64, v: f64) -> Option<bool> {
    let inside_square = u.abs() <= 1.0 && v.abs() <= 1.0;
    let r2 = u * u + v * v;
    match shape {
        Shape::Disc => (r2 <= 1.0).then_some(true),
        Shape::Ring => (r2 <= 1.0 && r2 >= 0.3).then_some(true),
        Shape::Square => inside_square.then_some(true),
        Shape::Triangle => (inside_square && u.abs() <= (v + 1.0) / 2.0).then_some(true),
        Shape::Cross => (inside_square && (u.abs() <= 0.35 || v.abs() <= 0.35)).then_some(true),
        Shape::Texture(bits) => inside_square.then(|| {
            let ix = (((u + 1.0) * 2.0) as usize).min(3);
            let iy = (((v + 1.0) * 2.0) as usize).min(3);
            bits >> (iy * 4 + ix) & 1 == 1
        }),
    }
}

/// A placed motif instance before rendering.
#[derive(Clone, Copy, Debug)]
pub struct Instance {
    pub pattern: usize,
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
    pub color_shift: [f64; 3],
}

/// Rendered scene with its id buffer. Id 0 is background, `1..=n` are
/// instances, higher ids are distractors.
pub struct Scene {
    pub image: RgbImage,
    pub ids: Vec<u16>,
    pub motifs: Vec<Motif>,
    pub instances: Vec<Instance>,
    pub annotation: SampleAnnotation,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn bright<R: Rng>(rng: &mut R, hue: f64) -> [f64; 3] {
    hsv(hue, rng.gen_range(0.65..0.95), rng.gen_range(0.8..1.0))
}

fn make_motifs<R: Rng>(spec: &GenSpec, short: f64, rng: &mut R) -> Vec<Motif> {
    let h0: f64 = rng.gen();
    let mut size = || short * rng.gen_range(spec.motif_size[0]..=spec.motif_size[1]);
    let n = spec.patterns;
    match spec.motif {
        MotifFamily::Bigram => {
            // AB, its reflection BA, then an unrelated pair CD
            let s = size();
            let mut pick = |shape, k: f64| Element {
                shape,
                color: bright(rng, h0 + k / 4.0),
                alt: [0.0; 3],
            };
            let ab = Motif {
                first: pick(Shape::Disc, 0.0),
                second: Some(pick(Shape::Square, 1.0)),
                size: s,
            };
            let cd = Motif {
                first: pick(Shape::Triangle, 2.0),
                second: Some(pick(Shape::Cross, 3.0)),
                size: s,
            };
            [ab, ab.reflected(), cd].into_iter().take(n).collect()
        }
        family => {
            let sizes: Vec<f64> = (0..n).map(|_| size()).collect();
            (0..n)
                .map(|i| {
                    let hue = h0 + i as f64 / n as f64;
                    let shape = match family {
                        MotifFamily::Disc => Shape::Disc,
                        MotifFamily::Ring => Shape::Ring,
                        _ => Shape::Texture(rng.gen_range(1..u16::MAX)),
                    };
                    Motif {
                        first: Element {
                            shape,
                            color: bright(rng, hue),
                            alt: hsv(hue + 0.5, 0.5, 0.45),
                        },
                        second: None,
                        size: sizes[i],
                    }
                })
                .collect()
        }
    }
}

fn gen_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TmrError::Generation(msg.into()))
}

/// Motif centers, one per slot.
fn layout<R: Rng>(spec: &GenSpec, ext: (f64, f64), rng: &mut R) -> Result<Vec<(f64, f64)>> {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let (ew, eh) = ext;
    let factor = rng.gen_range(spec.spacing[0]..=spec.spacing[1]);
    let hex = spec.lattice == Lattice::Hex;
    let px = ew * factor;
    let py = eh * factor * if hex { 0.866 } else { 1.0 };
    let (jx, jy) = (spec.jitter * px, spec.jitter * py);
    let min_slots = spec.patterns.max(spec.min_instances);
    let fits = |free: f64, pitch: f64| {
        if free < 0.0 {
            0
        } else {
            (free / pitch).floor() as usize + 1
        }
    };
    let hex_shift = if hex { px / 2.0 } else { 0.0 };
    let cols_max = fits(w - ew - 2.0 * jx - hex_shift, px);
    let rows_max = fits(h - eh - 2.0 * jy, py);
    if cols_max == 0 || rows_max == 0 {
        return gen_err(format!(
            "motif extent {ew:.1}x{eh:.1} does not fit a {w}x{h} image"
        ));
    }
    if spec.lattice == Lattice::Scattered {
        let n = rng.gen_range(min_slots..=spec.max_instances);
        let mut pts: Vec<(f64, f64)> = Vec::with_capacity(n);
        for _ in 0..200 * n {
            if pts.len() == n {
                break;
            }
            let p = (
                rng.gen_range(ew / 2.0..=w - ew / 2.0),
                rng.gen_range(eh / 2.0..=h - eh / 2.0),
            );
            // boxes may touch but centers keep most of a motif apart
            if pts
                .iter()
                .all(|q| (p.0 - q.0).abs() >= 0.9 * ew || (p.1 - q.1).abs() >= 0.9 * eh)
            {
                pts.push(p);
            }
        }
        if pts.len() < n {
            return gen_err(format!(
                "could not scatter {n} motifs of {ew:.1}x{eh:.1} px"
            ));
        }
        return Ok(pts);
    }
    let (rows, cols) = match (spec.lattice, spec.lattice_dims) {
        (Lattice::FriezeRow, _) => {
            let hi = cols_max.min(spec.max_instances);
            if hi < min_slots {
                return gen_err("frieze row cannot hold one motif per pattern");
            }
            (1, rng.gen_range(min_slots..=hi))
        }
        (_, Some([r, c])) => {
            if r > rows_max || c > cols_max {
                return gen_err(format!(
                    "{r}x{c} lattice does not fit (max {rows_max}x{cols_max})"
                ));
            }
            (r, c)
        }
        _ => {
            let options: Vec<(usize, usize)> = (1..=rows_max)
                .flat_map(|r| (1..=cols_max).map(move |c| (r, c)))
                .filter(|&(r, c)| r * c >= min_slots && r * c <= spec.max_instances)
                .collect();
            match options.choose(rng) {
                Some(&rc) => rc,
                None => return gen_err("no lattice size satisfies the instance limits"),
            }
        }
    };
    let span_x = (cols - 1) as f64 * px + if rows > 1 { hex_shift } else { 0.0 };
    let span_y = (rows - 1) as f64 * py;
    let x0 = ew / 2.0 + jx + rng.gen_range(0.0..=(w - ew - 2.0 * jx - span_x).max(0.0));
    let y0 = eh / 2.0 + jy + rng.gen_range(0.0..=(h - eh - 2.0 * jy - span_y).max(0.0));
    let mut pts = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let shift = if r % 2 == 1 { hex_shift } else { 0.0 };
            let dx = if jx > 0.0 {
                rng.gen_range(-jx..=jx)
            } else {
                0.0
            };
            let dy = if jy > 0.0 {
                rng.gen_range(-jy..=jy)
            } else {
                0.0
            };
            pts.push((x0 + c as f64 * px + shift + dx, y0 + r as f64 * py + dy));
        }
    }
    Ok(pts)
}

struct Canvas {
    width: usize,
    height: usize,
    rgb: Vec<[f64; 3]>,
    ids: Vec<u16>,
}

impl Canvas {
    /// Paints one element whose square has center `(ecx, ecy)` and half side `r`.
    fn paint(&mut self, el: &Element, ecx: f64, ecy: f64, r: f64, shift: [f64; 3], id: u16) {
        let x_lo = ((ecx - r).floor().max(0.0)) as usize;
        let y_lo = ((ecy - r).floor().max(0.0)) as usize;
        let x_hi = ((ecx + r).ceil().max(0.0) as usize).min(self.width);
        let y_hi = ((ecy + r).ceil().max(0.0) as usize).min(self.height);
        for y in y_lo..y_hi {
            let v = (y as f64 + 0.5 - ecy) / r;
            for x in x_lo..x_hi {
                let u = (x as f64 + 0.5 - ecx) / r;
                if let Some(primary) = coverage(el.shape, u, v) {
                    let base = if primary { el.color } else { el.alt };
                    let i = y * self.width + x;
                    self.rgb[i] = [base[0] + shift[0], base[1] + shift[1], base[2] + shift[2]];
                    self.ids[i] = id;
                }
            }
        }
    }

    fn paint_motif(&mut self, m: &Motif, inst: &Instance, id: u16) {
        let s = m.size * inst.scale;
        let r = s / 2.0;
        match &m.second {
            None => self.paint(&m.first, inst.cx, inst.cy, r, inst.color_shift, id),
            Some(second) => {
                let off = (s + PAIR_GAP * s) / 2.0;
                self.paint(&m.first, inst.cx - off, inst.cy, r, inst.color_shift, id);
                self.paint(second, inst.cx + off, inst.cy, r, inst.color_shift, id);
            }
        }
    }
}

/// Generates one image with its annotation.
pub fn render_scene(spec: &GenSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width as usize, spec.height as usize);
    let short = w.min(h) as f64;
    let motifs = make_motifs(spec, short, &mut rng);
    let max_scale = 1.0 + spec.scale_var;
    let ext = motifs.iter().fold((0.0f64, 0.0f64), |acc, m| {
        let (ew, eh) = m.extent(max_scale);
        (acc.0.max(ew), acc.1.max(eh))
    });
    let centers = layout(spec, ext, &mut rng)?;
    if centers.len() >= u16::MAX as usize / 2 {
        return gen_err("too many instances");
    }

    // balanced pattern assignment over shuffled slots
    let mut order: Vec<usize> = (0..centers.len()).collect();
    order.shuffle(&mut rng);
    let mut instances: Vec<Instance> = vec![
        Instance {
            pattern: 0,
            cx: 0.0,
            cy: 0.0,
            scale: 1.0,
            color_shift: [0.0; 3],
        };
        centers.len()
    ];
    for (k, &slot) in order.iter().enumerate() {
        let cv = spec.color_var;
        let mut shift = || {
            if cv > 0.0 {
                rng.gen_range(-cv..=cv)
            } else {
                0.0
            }
        };
        let color_shift = [shift(), shift(), shift()];
        let scale = if spec.scale_var > 0.0 {
            rng.gen_range(1.0 - spec.scale_var..=1.0 + spec.scale_var)
        } else {
            1.0
        };
        instances[slot] = Instance {
            pattern: k % spec.patterns,
            cx: centers[slot].0,
            cy: centers[slot].1,
            scale,
            color_shift,
        };
    }

    let bg_level = rng.gen_range(0.12..0.3);
    let tint = [
        rng.gen_range(-0.04..0.04),
        rng.gen_range(-0.04..0.04),
        rng.gen_range(-0.04..0.04),
    ];
    let mut canvas = Canvas {
        width: w,
        height: h,
        rgb: (0..w * h)
            .map(|_| {
                let n = rng.gen_range(-0.03..0.03);
                [
                    bg_level + tint[0] + n,
                    bg_level + tint[1] + n,
                    bg_level + tint[2] + n,
                ]
            })
            .collect(),
        ids: vec![0; w * h],
    };

    // clutter goes underneath the motifs
    let n_distractors = (spec.distractor_density * (w * h) as f64 / 1e4).round() as usize;
    let clutter_shapes = match spec.motif {
        MotifFamily::Bigram => [Shape::Disc, Shape::Cross],
        _ => [Shape::Triangle, Shape::Cross],
    };
    let base_size = motifs.iter().map(|m| m.size).fold(0.0, f64::max);
    for k in 0..n_distractors {
        let el = Element {
            shape: clutter_shapes[k % 2],
            color: hsv(
                rng.gen(),
                rng.gen_range(0.0..0.35),
                rng.gen_range(0.45..0.7),
            ),
            alt: [0.0; 3],
        };
        let r = base_size * rng.gen_range(0.35..0.6);
        let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        canvas.paint(
            &el,
            cx,
            cy,
            r,
            [0.0; 3],
            (centers.len() + 1 + k).min(u16::MAX as usize) as u16,
        );
    }

    let mut paint_order: Vec<usize> = (0..instances.len()).collect();
    paint_order.shuffle(&mut rng);
    for &i in &paint_order {
        let inst = instances[i];
        canvas.paint_motif(&motifs[inst.pattern], &inst, (i + 1) as u16);
    }

    // visible extent of every instance
    let mut bounds = vec![(usize::MAX, usize::MAX, 0usize, 0usize); instances.len()];
    let mut visible = vec![0usize; instances.len()];
    for y in 0..h {
        for x in 0..w {
            let id = canvas.ids[y * w + x] as usize;
            if id >= 1 && id <= instances.len() {
                let b = &mut bounds[id - 1];
                *b = (b.0.min(x), b.1.min(y), b.2.max(x + 1), b.3.max(y + 1));
                visible[id - 1] += 1;
            }
        }
    }

    let min_side = MIN_BOX_FRACTION * short;
    let mut patterns: Vec<PatternAnnotation> = (0..spec.patterns)
        .map(|p| PatternAnnotation {
            id: p as u32,
            exemplars: Vec::new(),
            boxes: Vec::new(),
        })
        .collect();
    let mut unoccluded: Vec<Vec<bool>> = vec![Vec::new(); spec.patterns];
    for (i, inst) in instances.iter().enumerate() {
        if visible[i] == 0 {
            continue;
        }
        let (x1, y1, x2, y2) = bounds[i];
        let b = BoxXYWH::from_corners(x1 as f64, y1 as f64, x2 as f64, y2 as f64);
        if b.w < min_side || b.h < min_side {
            continue;
        }
        let (ew, eh) = motifs[inst.pattern].extent(inst.scale);
        patterns[inst.pattern].boxes.push(b);
        unoccluded[inst.pattern].push(b.w >= ew - 1.0 && b.h >= eh - 1.0);
    }
    for (p, pat) in patterns.iter_mut().enumerate() {
        if pat.boxes.is_empty() {
            return gen_err(format!("pattern {p} has no visible instance"));
        }
        let mut pool: Vec<usize> = (0..pat.boxes.len()).filter(|&i| unoccluded[p][i]).collect();
        if pool.len() < spec.exemplars {
            pool = (0..pat.boxes.len()).collect();
        }
        pool.shuffle(&mut rng);
        pool.truncate(spec.exemplars);
        pat.exemplars = pool.iter().map(|&i| pat.boxes[i]).collect();
    }

    let image = RgbImage::from_fn(spec.width, spec.height, |x, y| {
        let c = canvas.rgb[y as usize * w + x as usize];
        Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    Ok(Scene {
        image,
        ids: canvas.ids,
        motifs,
        instances,
        annotation: SampleAnnotation {
            image: String::new(),
            width: spec.width,
            height: spec.height,
            patterns,
            edgeless: None,
        },
    })
}

/// Image and annotation for one spec.
pub fn generate(spec: &GenSpec) -> Result<(RgbImage, SampleAnnotation)> {
    let scene = render_scene(spec)?;
    Ok((scene.image, scene.annotation))
}
