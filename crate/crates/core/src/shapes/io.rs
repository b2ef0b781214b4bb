//! Text persistence for shape models: one node per line.
//!
//! ```text
//! shape v1 <node_count>
//! <op> <kind> <sizes...> <cx> <cy> <cz> <r00> <r01> ... <r22>
//! ```
//!
//! `op` is `union` or `difference`; `kind` is `sphere r`, `box hx hy hz`,
//! `capsule hh r`, or `cylinder hh r`. Floats use the shortest decimal form
//! that round-trips, so re-reading reproduces the exact values. A shape set
//! file prefixes `shapeset v1 <count>` and concatenates shape blocks.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{BoolOp, Primitive, PrimitiveKind, ShapeModel, ShapeNode, ShapesError};
use crate::mathcore::{Mat3, Vec3};

fn write_node(w: &mut impl Write, n: &ShapeNode) -> std::io::Result<()> {
    let op = match n.op {
        BoolOp::Union => "union",
        BoolOp::Difference => "difference",
    };
    write!(w, "{op} {}", n.primitive.kind.keyword())?;
    match n.primitive.kind {
        PrimitiveKind::Sphere { radius } => write!(w, " {radius}")?,
        PrimitiveKind::Cuboid { half_extents: h } => write!(w, " {} {} {}", h.x, h.y, h.z)?,
        PrimitiveKind::Capsule { half_height, radius }
        | PrimitiveKind::Cylinder { half_height, radius } => {
            write!(w, " {half_height} {radius}")?
        }
    }
    let c = n.primitive.center;
    write!(w, " {} {} {}", c.x, c.y, c.z)?;
    for i in 0..3 {
        for j in 0..3 {
            write!(w, " {}", n.primitive.rotation.m[i][j])?;
        }
    }
    writeln!(w)
}

fn shape_to_writer(w: &mut impl Write, m: &ShapeModel) -> std::io::Result<()> {
    writeln!(w, "shape v1 {}", m.nodes().len())?;
    for n in m.nodes() {
        write_node(w, n)?;
    }
    Ok(())
}

pub fn write_shape(path: &Path, m: &ShapeModel) -> Result<(), ShapesError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    shape_to_writer(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn write_shape_set(path: &Path, shapes: &[ShapeModel]) -> Result<(), ShapesError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "shapeset v1 {}", shapes.len())?;
    for m in shapes {
        shape_to_writer(&mut w, m)?;
    }
    w.flush()?;
    Ok(())
}

struct LineReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> LineReader<'a> {
    fn new(text: &'a str) -> Self {
        LineReader { lines: text.lines().enumerate() }
    }

    /// Next non-empty line with its 1-based number.
    fn next(&mut self) -> Result<(usize, &'a str), ShapesError> {
        for (i, line) in self.lines.by_ref() {
            let t = line.trim();
            if !t.is_empty() {
                return Ok((i + 1, t));
            }
        }
        Err(ShapesError::Parse("unexpected end of file".into()))
    }
}

fn parse_header(line: &str, lineno: usize, tag: &str) -> Result<usize, ShapesError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 3 || fields[0] != tag || fields[1] != "v1" {
        return Err(ShapesError::Parse(format!("line {lineno}: expected '{tag} v1 <count>'")));
    }
    fields[2]
        .parse::<usize>()
        .map_err(|e| ShapesError::Parse(format!("line {lineno}: bad count: {e}")))
}

fn parse_node(line: &str, lineno: usize) -> Result<ShapeNode, ShapesError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let err = |msg: &str| ShapesError::Parse(format!("line {lineno}: {msg}"));
    if fields.len() < 2 {
        return Err(err("missing op or kind"));
    }
    let op = match fields[0] {
        "union" => BoolOp::Union,
        "difference" => BoolOp::Difference,
        other => return Err(err(&format!("unknown op '{other}'"))),
    };
    let mut nums = Vec::with_capacity(fields.len() - 2);
    for f in &fields[2..] {
        nums.push(f.parse::<f64>().map_err(|e| err(&format!("bad number '{f}': {e}")))?);
    }
    let size_count = match fields[1] {
        "sphere" => 1,
        "box" => 3,
        "capsule" | "cylinder" => 2,
        other => return Err(err(&format!("unknown kind '{other}'"))),
    };
    if nums.len() != size_count + 12 {
        return Err(err(&format!(
            "expected {} numeric fields, got {}",
            size_count + 12,
            nums.len()
        )));
    }
    let kind = match fields[1] {
        "sphere" => PrimitiveKind::Sphere { radius: nums[0] },
        "box" => PrimitiveKind::Cuboid { half_extents: Vec3::new(nums[0], nums[1], nums[2]) },
        "capsule" => PrimitiveKind::Capsule { half_height: nums[0], radius: nums[1] },
        _ => PrimitiveKind::Cylinder { half_height: nums[0], radius: nums[1] },
    };
    let rest = &nums[size_count..];
    let center = Vec3::new(rest[0], rest[1], rest[2]);
    let mut rotation = Mat3::ZERO;
    for i in 0..3 {
        for j in 0..3 {
            rotation.m[i][j] = rest[3 + 3 * i + j];
        }
    }
    Ok(ShapeNode { op, primitive: Primitive { kind, rotation, center } })
}

fn shape_from_reader(r: &mut LineReader) -> Result<ShapeModel, ShapesError> {
    let (lineno, header) = r.next()?;
    let count = parse_header(header, lineno, "shape")?;
    let mut nodes = Vec::with_capacity(count);
    for _ in 0..count {
        let (lineno, line) = r.next()?;
        nodes.push(parse_node(line, lineno)?);
    }
    ShapeModel::new(nodes)
}

pub fn read_shape(path: &Path) -> Result<ShapeModel, ShapesError> {
    let text = fs::read_to_string(path)?;
    let mut r = LineReader::new(&text);
    let shape = shape_from_reader(&mut r)?;
    if r.next().is_ok() {
        return Err(ShapesError::Parse("trailing content after shape".into()));
    }
    Ok(shape)
}

pub fn read_shape_set(path: &Path) -> Result<Vec<ShapeModel>, ShapesError> {
    let text = fs::read_to_string(path)?;
    let mut r = LineReader::new(&text);
    let (lineno, header) = r.next()?;
    let count = parse_header(header, lineno, "shapeset")?;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        shapes.push(shape_from_reader(&mut r)?);
    }
    if r.next().is_ok() {
        return Err(ShapesError::Parse("trailing content after shape set".into()));
    }
    Ok(shapes)
}
