//! Rasterization of instances into image tensors: point cloud, MST overlay,
//! and k-nearest-neighbor-graph overlay channels.
//!
//! Coordinates are min-max scaled per axis so the drawing fills the whole
//! image (row 0 is the top; larger y renders higher). Intensities are binary
//! (1.0 foreground on 0.0 background, no anti-aliasing) with 1-pixel points
//! and Bresenham line segments. Strong and weak graph edges are drawn
//! identically in the single graph channel.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::error::Error;
use crate::graph;
use crate::instance::Instance;
use crate::Result;

/// Image channel kinds, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ChannelRole {
    Points,
    Mst,
    Nng,
}

impl ChannelRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChannelRole::Points => "points",
            ChannelRole::Mst => "mst",
            ChannelRole::Nng => "nng",
        }
    }
}

impl std::str::FromStr for ChannelRole {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "points" => Ok(ChannelRole::Points),
            "mst" => Ok(ChannelRole::Mst),
            "nng" => Ok(ChannelRole::Nng),
            other => Err(Error::invalid(format!("unknown channel role `{other}`"))),
        }
    }
}

/// Which channels to render; always materialized in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RoleSet {
    pub points: bool,
    pub mst: bool,
    pub nng: bool,
}

impl RoleSet {
    pub fn all() -> Self {
        RoleSet {
            points: true,
            mst: true,
            nng: true,
        }
    }

    /// Parses a comma-separated role list, e.g. `points,mst`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut set = RoleSet::default();
        for part in text.split(',') {
            match part.trim().parse::<ChannelRole>()? {
                ChannelRole::Points => set.points = true,
                ChannelRole::Mst => set.mst = true,
                ChannelRole::Nng => set.nng = true,
            }
        }
        Ok(set)
    }

    pub fn roles(&self) -> Vec<ChannelRole> {
        let mut roles = Vec::new();
        if self.points {
            roles.push(ChannelRole::Points);
        }
        if self.mst {
            roles.push(ChannelRole::Mst);
        }
        if self.nng {
            roles.push(ChannelRole::Nng);
        }
        roles
    }

    pub fn is_empty(&self) -> bool {
        !(self.points || self.mst || self.nng)
    }
}

/// A C x H x W raster with values in [0,1], channel-major row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channel_roles: Vec<ChannelRole>,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn channels(&self) -> usize {
        self.channel_roles.len()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let size = self.height * self.width;
        &self.data[c * size..(c + 1) * size]
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.height + row) * self.width + col]
    }

    /// Number of nonzero pixels in one channel.
    pub fn lit_count(&self, c: usize) -> usize {
        self.channel(c).iter().filter(|&&v| v != 0.0).count()
    }
}

/// Flags marking axes with zero extent (all points collapse onto the center
/// line of that axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DegenerateAxes {
    pub x: bool,
    pub y: bool,
}

/// Maps node coordinates to `(col, row)` pixel positions, min-max scaled per
/// axis to fill the image; y is inverted so larger y renders higher. Rounding
/// is to the nearest pixel, half up.
pub fn normalize_coords(
    inst: &Instance,
    width: usize,
    height: usize,
) -> Result<(Vec<(usize, usize)>, DegenerateAxes)> {
    if width < 2 || height < 2 {
        return Err(Error::invalid(format!(
            "image must be at least 2x2, got {width}x{height}"
        )));
    }
    let xs: Vec<f64> = inst.nodes().iter().map(|&(x, _)| x).collect();
    let ys: Vec<f64> = inst.nodes().iter().map(|&(_, y)| y).collect();
    let (min_x, max_x) = min_max(&xs);
    let (min_y, max_y) = min_max(&ys);
    let degenerate = DegenerateAxes {
        x: min_x == max_x,
        y: min_y == max_y,
    };

    let w_span = (width - 1) as f64;
    let h_span = (height - 1) as f64;
    let pixels = inst
        .nodes()
        .iter()
        .map(|&(x, y)| {
            let col = if degenerate.x {
                (w_span / 2.0).round() as usize
            } else {
                ((x - min_x) / (max_x - min_x) * w_span).round() as usize
            };
            let up = if degenerate.y {
                (h_span / 2.0).round() as usize
            } else {
                ((y - min_y) / (max_y - min_y) * h_span).round() as usize
            };
            (col, height - 1 - up)
        })
        .collect();
    Ok((pixels, degenerate))
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

/// All pixels of the Bresenham segment between two points, endpoints
/// included.
pub fn bresenham(from: (i64, i64), to: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = from;
    let (x1, y1) = to;
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut points = Vec::with_capacity((dx - dy) as usize + 1);
    loop {
        points.push((x, y));
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    points
}

/// Rasterizes an instance. The points channel lights one pixel per node; the
/// MST channel additionally draws each tree edge; the graph channel draws
/// every directed k-NN edge (mutual and one-sided alike).
pub fn render(
    inst: &Instance,
    roles: RoleSet,
    width: usize,
    height: usize,
    k: usize,
) -> Result<ImageTensor> {
    if roles.is_empty() {
        return Err(Error::invalid("render needs at least one channel role"));
    }
    let (pixels, _) = normalize_coords(inst, width, height)?;
    let size = height * width;
    let mut data = Vec::with_capacity(roles.roles().len() * size);

    let draw_nodes = |mask: &mut [f32]| {
        for &(col, row) in &pixels {
            mask[row * width + col] = 1.0;
        }
    };
    let draw_segment = |mask: &mut [f32], a: usize, b: usize| {
        // Bresenham is direction-dependent; canonicalize the endpoint order
        // so edges rasterize as sets, independent of node input order.
        let (mut from, mut to) = (pixels[a], pixels[b]);
        if to < from {
            std::mem::swap(&mut from, &mut to);
        }
        for (c, r) in bresenham((from.0 as i64, from.1 as i64), (to.0 as i64, to.1 as i64)) {
            mask[r as usize * width + c as usize] = 1.0;
        }
    };

    if roles.points {
        let mut mask = vec![0.0f32; size];
        draw_nodes(&mut mask);
        data.extend_from_slice(&mask);
    }
    if roles.mst {
        let mut mask = vec![0.0f32; size];
        draw_nodes(&mut mask);
        let mst = graph::minimum_spanning_tree(inst);
        for &(i, j, _) in &mst.edges {
            draw_segment(&mut mask, i, j);
        }
        data.extend_from_slice(&mask);
    }
    if roles.nng {
        let mut mask = vec![0.0f32; size];
        draw_nodes(&mut mask);
        let g = graph::knn_graph(inst, k)?;
        for (i, neighbors) in g.out_neighbors.iter().enumerate() {
            for &j in neighbors {
                draw_segment(&mut mask, i, j);
            }
        }
        data.extend_from_slice(&mask);
    }

    Ok(ImageTensor {
        height,
        width,
        channel_roles: roles.roles(),
        data,
    })
}

/// Writes one channel as a binary PGM (P5, maxval 255), foreground black on a
/// white background. Binary masks survive a round trip exactly.
pub fn write_pgm<W: Write>(img: &ImageTensor, channel: usize, mut writer: W) -> Result<()> {
    if channel >= img.channels() {
        return Err(Error::invalid(format!(
            "channel {channel} out of range for {}-channel tensor",
            img.channels()
        )));
    }
    write!(writer, "P5\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img
        .channel(channel)
        .iter()
        .map(|&v| 255 - (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    writer.write_all(&bytes)?;
    Ok(())
}

pub fn export_pgm(img: &ImageTensor, channel: usize, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_pgm(img, channel, std::io::BufWriter::new(file))
}

/// Reads a P5 PGM written by [`write_pgm`] back into a single-channel mask
/// with values in [0,1] (255 - byte, rescaled).
pub fn read_pgm<R: Read>(reader: R, path: &str) -> Result<(usize, usize, Vec<f32>)> {
    let mut reader = std::io::BufReader::new(reader);
    let bad = |reason: &str| Error::BadFileFormat {
        path: path.to_string(),
        reason: reason.to_string(),
    };
    let mut header = String::new();
    for _ in 0..3 {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(bad("truncated header"));
        }
        header.push_str(&line);
    }
    let mut fields = header.split_whitespace();
    if fields.next() != Some("P5") {
        return Err(bad("not a P5 PGM"));
    }
    let width: usize = fields
        .next()
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| bad("bad width"))?;
    let height: usize = fields
        .next()
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| bad("bad height"))?;
    if fields.next() != Some("255") {
        return Err(bad("maxval must be 255"));
    }
    let mut bytes = vec![0u8; width * height];
    reader.read_exact(&mut bytes)?;
    let values = bytes
        .into_iter()
        .map(|b| (255 - b) as f32 / 255.0)
        .collect();
    Ok((width, height, values))
}

const TENSOR_MAGIC: &str = "TSPIMG 1";

/// Writes the multi-channel tensor interchange format: a short text header
/// (magic, `C H W`, channel roles, `DATA`) followed by the C*H*W values as
/// little-endian 32-bit floats in channel-major row-major order.
pub fn write_tensor<W: Write>(img: &ImageTensor, mut writer: W) -> Result<()> {
    let roles: Vec<&str> = img.channel_roles.iter().map(|r| r.as_str()).collect();
    write!(
        writer,
        "{TENSOR_MAGIC}\n{} {} {}\n{}\nDATA\n",
        img.channels(),
        img.height,
        img.width,
        roles.join(",")
    )?;
    for &v in &img.data {
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(reader: R, path: &str) -> Result<ImageTensor> {
    let mut reader = std::io::BufReader::new(reader);
    let bad = |reason: String| Error::BadFileFormat {
        path: path.to_string(),
        reason,
    };
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != TENSOR_MAGIC {
        return Err(bad(format!("bad magic `{}`", line.trim_end())));
    }
    line.clear();
    reader.read_line(&mut line)?;
    let dims: Vec<usize> = line
        .split_whitespace()
        .map(|f| f.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad(format!("bad dimension line `{}`", line.trim_end())))?;
    let [c, h, w] = dims[..] else {
        return Err(bad(format!("expected `C H W`, got `{}`", line.trim_end())));
    };
    line.clear();
    reader.read_line(&mut line)?;
    let channel_roles: Vec<ChannelRole> = line
        .trim_end()
        .split(',')
        .map(|r| r.parse())
        .collect::<Result<_>>()?;
    if channel_roles.len() != c {
        return Err(bad(format!(
            "{} roles for {c} channels",
            channel_roles.len()
        )));
    }
    line.clear();
    reader.read_line(&mut line)?;
    if line.trim_end() != "DATA" {
        return Err(bad("missing DATA marker".into()));
    }
    let mut bytes = vec![0u8; c * h * w * 4];
    reader.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|chunk| f32::from_le_bytes(chunk.try_into().unwrap()))
        .collect();
    Ok(ImageTensor {
        height: h,
        width: w,
        channel_roles,
        data,
    })
}

pub fn export_tensor(img: &ImageTensor, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_tensor(img, std::io::BufWriter::new(file))
}

pub fn import_tensor(path: &Path) -> Result<ImageTensor> {
    let file = std::fs::File::open(path)?;
    read_tensor(file, &path.display().to_string())
}
