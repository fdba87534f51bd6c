//! Landmark sets and the line-based label format.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::heatmap::PixelCoord;
use crate::textio::LineReader;

/// Real-valued 2-D point in heatmap pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Nearest pixel.
    pub fn to_pixel(self) -> PixelCoord {
        PixelCoord::new(self.x.round() as i64, self.y.round() as i64)
    }
}

impl From<PixelCoord> for Point2 {
    fn from(c: PixelCoord) -> Self {
        Point2::new(c.x as f64, c.y as f64)
    }
}

/// What a landmark set stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Truth,
    Annotation,
    Latent,
    Prediction,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Truth => "truth",
            Role::Annotation => "annotation",
            Role::Latent => "latent",
            Role::Prediction => "prediction",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truth" => Ok(Role::Truth),
            "annotation" | "observation" => Ok(Role::Annotation),
            "latent" => Ok(Role::Latent),
            "prediction" => Ok(Role::Prediction),
            _ => Err(Error::invalid(format!("unknown landmark role `{s}`"))),
        }
    }
}

/// An ordered set of `N` landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<Point2>,
    pub role: Role,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point2>, role: Role) -> Self {
        Self { points, role }
    }

    pub fn from_pixels(pixels: &[PixelCoord], role: Role) -> Self {
        Self {
            points: pixels.iter().map(|&c| c.into()).collect(),
            role,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_pixels(&self) -> Vec<PixelCoord> {
        self.points.iter().map(|p| p.to_pixel()).collect()
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// Flattened `[x0, y0, x1, y1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn from_flat(flat: &[f64], role: Role) -> Self {
        Self {
            points: flat.chunks_exact(2).map(|c| Point2::new(c[0], c[1])).collect(),
            role,
        }
    }

    pub(crate) fn write_lines(&self, sample_id: u64, out: &mut String) {
        for (k, p) in self.points.iter().enumerate() {
            let _ = writeln!(out, "label {sample_id} {k} {} {} {}", p.x, p.y, self.role);
        }
    }
}

/// Labels of several samples, one `LandmarkSet` per sample id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelFile {
    pub entries: Vec<(u64, LandmarkSet)>,
}

impl LabelFile {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (id, set) in &self.entries {
            set.write_lines(*id, &mut s);
        }
        s
    }

    /// Parses `label <sample_id> <landmark_index> <x> <y> <role>` lines.
    ///
    /// Lines of one sample must be contiguous with indices `0..N` in order.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut reader = LineReader::new(text);
        let mut entries: Vec<(u64, LandmarkSet)> = Vec::new();
        while reader.peek_keyword().is_some() {
            let (id, k, p, role) = read_label_line(&mut reader)?;
            match entries.last_mut() {
                Some((last, set)) if *last == id => {
                    if k != set.points.len() || role != set.role {
                        return Err(reader.error(format!("landmark index {k} or role out of sequence for sample {id}")));
                    }
                    set.points.push(p);
                }
                _ => {
                    if k != 0 {
                        return Err(reader.error(format!("sample {id} must start at index 0")));
                    }
                    entries.push((id, LandmarkSet::new(vec![p], role)));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn sets(&self) -> impl Iterator<Item = &LandmarkSet> {
        self.entries.iter().map(|(_, s)| s)
    }
}

pub(crate) fn read_label_line(reader: &mut LineReader<'_>) -> Result<(u64, usize, Point2, Role)> {
    let toks = reader.next_tokens()?;
    if toks.len() != 6 || toks[0] != "label" {
        return Err(reader.error("expected `label <sample_id> <index> <x> <y> <role>`"));
    }
    let id = reader.parse_token(toks[1])?;
    let k = reader.parse_token(toks[2])?;
    let x = reader.parse_token(toks[3])?;
    let y = reader.parse_token(toks[4])?;
    let role = toks[5].parse().map_err(|e: Error| reader.error(e.to_string()))?;
    Ok((id, k, Point2::new(x, y), role))
}
