use std::fmt;

use super::{DataConfig, DataError};
use crate::tensor::Prng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeColor {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeSize {
    Small,
    Large,
}

/// Position relative to the image midlines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Location {
    Left,
    Right,
    Top,
    Bottom,
}

impl ShapeKind {
    pub const ALL: [Self; 3] = [Self::Circle, Self::Square, Self::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Square => "square",
            Self::Triangle => "triangle",
        }
    }
}

impl ShapeColor {
    pub const ALL: [Self; 4] = [Self::Red, Self::Green, Self::Blue, Self::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
            Self::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Self::Red => [220, 40, 40],
            Self::Green => [40, 180, 60],
            Self::Blue => [40, 80, 220],
            Self::Yellow => [230, 210, 40],
        }
    }
}

impl ShapeSize {
    pub const ALL: [Self; 2] = [Self::Small, Self::Large];

    pub fn word(self) -> &'static str {
        match self {
            Self::Small => "small",
            Self::Large => "large",
        }
    }

    /// Inclusive radius range in pixels for a `side`-pixel image; 5–7 and
    /// 10–12 at 64 pixels, scaled linearly.
    pub fn radius_range(self, side: usize) -> (usize, usize) {
        let scale = side as f64 / 64.0;
        let (lo, hi) = match self {
            Self::Small => (5.0, 7.0),
            Self::Large => (10.0, 12.0),
        };
        (
            ((lo * scale).round() as usize).max(1),
            ((hi * scale).round() as usize).max(1),
        )
    }
}

impl Location {
    pub const ALL: [Self; 4] = [Self::Left, Self::Right, Self::Top, Self::Bottom];

    pub fn word(self) -> &'static str {
        match self {
            Self::Left => "left",
            Self::Right => "right",
            Self::Top => "top",
            Self::Bottom => "bottom",
        }
    }
}

/// One shape; `center` is `(x, y)` in pixels, `radius` the half-extent
/// (circle radius, square half-side, triangle circumradius).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: ShapeColor,
    pub size: ShapeSize,
    pub radius: usize,
    pub center: (usize, usize),
}

impl ShapeSpec {
    /// Radius of the smallest centred disc containing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match self.kind {
            ShapeKind::Square => self.radius as f64 * std::f64::consts::SQRT_2,
            ShapeKind::Circle | ShapeKind::Triangle => self.radius as f64,
        }
    }

    pub fn horizontal(&self, width: usize) -> Location {
        if 2 * self.center.0 < width {
            Location::Left
        } else {
            Location::Right
        }
    }

    pub fn vertical(&self, height: usize) -> Location {
        if 2 * self.center.1 < height {
            Location::Top
        } else {
            Location::Bottom
        }
    }

    /// Hard rasterisation test for pixel `(x, y)`.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 - self.center.0 as f64;
        let dy = y as f64 - self.center.1 as f64;
        let r = self.radius as f64;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => {
                // Upward equilateral triangle inscribed in the radius-r circle
                // (y grows downwards).
                let h = 3f64.sqrt() / 2.0 * r;
                let verts = [(0.0, -r), (h, r / 2.0), (-h, r / 2.0)];
                (0..3).all(|i| {
                    let (ax, ay) = verts[i];
                    let (bx, by) = verts[(i + 1) % 3];
                    (bx - ax) * (dy - ay) - (by - ay) * (dx - ax) >= -1e-9
                })
            }
        }
    }
}

impl fmt::Display for ShapeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} x={} y={} r={}",
            self.size.word(),
            self.color.word(),
            self.kind.word(),
            self.center.0,
            self.center.1,
            self.radius
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub shapes: Vec<ShapeSpec>,
    pub target_index: usize,
}

impl Scene {
    pub fn target(&self) -> &ShapeSpec {
        &self.shapes[self.target_index]
    }
}

/// The attribute constraints an expression places on its referent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Predicate {
    pub kind: ShapeKind,
    pub size: Option<ShapeSize>,
    pub color: Option<ShapeColor>,
    pub location: Option<Location>,
}

impl Predicate {
    pub fn matches(&self, shape: &ShapeSpec, width: usize, height: usize) -> bool {
        shape.kind == self.kind
            && self.size.is_none_or(|s| s == shape.size)
            && self.color.is_none_or(|c| c == shape.color)
            && self.location.is_none_or(|l| match l {
                Location::Left | Location::Right => shape.horizontal(width) == l,
                Location::Top | Location::Bottom => shape.vertical(height) == l,
            })
    }

    pub fn match_count(&self, scene: &Scene) -> usize {
        scene
            .shapes
            .iter()
            .filter(|s| self.matches(s, scene.width, scene.height))
            .count()
    }

    /// Number of optional slots in use.
    pub fn slots(&self) -> usize {
        self.size.is_some() as usize + self.color.is_some() as usize + self.location.is_some() as usize
    }

    /// Template realisation: `the [size] [color] kind [on the location]`.
    pub fn words(&self) -> Vec<&'static str> {
        let mut w = vec!["the"];
        w.extend(self.size.map(ShapeSize::word));
        w.extend(self.color.map(ShapeColor::word));
        w.push(self.kind.word());
        if let Some(l) = self.location {
            w.extend(["on", "the", l.word()]);
        }
        w
    }

    /// Inverse of [`Predicate::words`].
    pub fn parse(words: &[&str]) -> Option<Self> {
        let (first, mut rest) = words.split_first()?;
        if *first != "the" {
            return None;
        }
        let take = |rest: &mut &[&str], word: &str| -> bool {
            if rest.first() == Some(&word) {
                *rest = &rest[1..];
                true
            } else {
                false
            }
        };
        let size = ShapeSize::ALL.into_iter().find(|s| take(&mut rest, s.word()));
        let color = ShapeColor::ALL.into_iter().find(|c| take(&mut rest, c.word()));
        let kind = ShapeKind::ALL.into_iter().find(|k| take(&mut rest, k.word()))?;
        let location = if rest.is_empty() {
            None
        } else {
            if !(take(&mut rest, "on") && take(&mut rest, "the")) {
                return None;
            }
            let l = Location::ALL.into_iter().find(|l| take(&mut rest, l.word()))?;
            Some(l)
        };
        rest.is_empty().then_some(Self {
            kind,
            size,
            color,
            location,
        })
    }
}

/// Every predicate the template can express for `shape`: kind plus any
/// subset of size, color and one location word.
pub fn candidate_predicates(shape: &ShapeSpec, width: usize, height: usize) -> Vec<Predicate> {
    let mut out = Vec::with_capacity(12);
    for size in [None, Some(shape.size)] {
        for color in [None, Some(shape.color)] {
            for location in [None, Some(shape.horizontal(width)), Some(shape.vertical(height))] {
                out.push(Predicate {
                    kind: shape.kind,
                    size,
                    color,
                    location,
                });
            }
        }
    }
    out
}

/// Uniquely identifying predicates of the target using the fewest slots
/// and realising to at most `max_words` words.
pub fn minimal_predicates(scene: &Scene, max_words: usize) -> Vec<Predicate> {
    let unique: Vec<Predicate> = candidate_predicates(scene.target(), scene.width, scene.height)
        .into_iter()
        .filter(|p| p.match_count(scene) == 1 && p.words().len() <= max_words)
        .collect();
    let Some(fewest) = unique.iter().map(Predicate::slots).min() else {
        return Vec::new();
    };
    unique.into_iter().filter(|p| p.slots() == fewest).collect()
}

/// Place 2–5 shapes by rejection sampling and pick a target that has a
/// uniquely identifying expression of at most `cfg.max_words` words.
pub fn generate_scene(cfg: &DataConfig, prng: &mut Prng) -> Result<Scene, DataError> {
    const ATTEMPTS: usize = 1000;
    const CENTER_TRIES: usize = 100;
    const MIDLINE_MARGIN: usize = 4;
    let (w, h) = (cfg.image_size, cfg.image_size);
    'attempt: for _ in 0..ATTEMPTS {
        let count = cfg.min_shapes + prng.below(cfg.max_shapes - cfg.min_shapes + 1);
        let mut shapes: Vec<ShapeSpec> = Vec::with_capacity(count);
        for _ in 0..count {
            let kind = ShapeKind::ALL[prng.below(3)];
            let color = ShapeColor::ALL[prng.below(4)];
            let size = ShapeSize::ALL[prng.below(2)];
            let (lo, hi) = size.radius_range(cfg.image_size);
            let radius = lo + prng.below(hi - lo + 1);
            if 2 * radius + 1 > w {
                continue 'attempt;
            }
            let mut placed = None;
            for _ in 0..CENTER_TRIES {
                let cx = radius + prng.below(w - 2 * radius);
                let cy = radius + prng.below(h - 2 * radius);
                if (2 * cx).abs_diff(w) < 2 * MIDLINE_MARGIN || (2 * cy).abs_diff(h) < 2 * MIDLINE_MARGIN {
                    continue;
                }
                let cand = ShapeSpec {
                    kind,
                    color,
                    size,
                    radius,
                    center: (cx, cy),
                };
                let clear = shapes.iter().all(|s| {
                    let dx = s.center.0 as f64 - cx as f64;
                    let dy = s.center.1 as f64 - cy as f64;
                    (dx * dx + dy * dy).sqrt() >= s.bounding_radius() + cand.bounding_radius() + 1.0
                });
                if clear {
                    placed = Some(cand);
                    break;
                }
            }
            match placed {
                Some(s) => shapes.push(s),
                None => continue 'attempt,
            }
        }
        let scene = Scene {
            width: w,
            height: h,
            target_index: prng.below(count),
            shapes,
        };
        if !minimal_predicates(&scene, cfg.max_words).is_empty() {
            return Ok(scene);
        }
    }
    Err(DataError::Generation(format!(
        "no valid scene after {ATTEMPTS} attempts for {w}×{h} images"
    )))
}

/// Pick one minimal identifying predicate at random; with probability
/// `cfg.redundancy` add one more true attribute if the length allows.
pub fn synthesize_expression(scene: &Scene, cfg: &DataConfig, prng: &mut Prng) -> Result<Vec<&'static str>, DataError> {
    let minimal = minimal_predicates(scene, cfg.max_words);
    if minimal.is_empty() {
        return Err(DataError::Contract("target has no identifying expression".into()));
    }
    let mut pred = minimal[prng.below(minimal.len())];
    if prng.next_f64() < cfg.redundancy {
        let target = scene.target();
        let mut extras = Vec::new();
        if pred.size.is_none() {
            extras.push(Predicate {
                size: Some(target.size),
                ..pred
            });
        }
        if pred.color.is_none() {
            extras.push(Predicate {
                color: Some(target.color),
                ..pred
            });
        }
        if pred.location.is_none() {
            extras.push(Predicate {
                location: Some(target.horizontal(scene.width)),
                ..pred
            });
            extras.push(Predicate {
                location: Some(target.vertical(scene.height)),
                ..pred
            });
        }
        extras.retain(|p| p.words().len() <= cfg.max_words);
        if !extras.is_empty() {
            pred = extras[prng.below(extras.len())];
        }
    }
    debug_assert_eq!(pred.match_count(scene), 1);
    Ok(pred.words())
}
