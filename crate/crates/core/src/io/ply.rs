//! PLY point clouds, ASCII or binary little-endian.
//!
//! Reads the `vertex` element's `x y z` (float or double), optional
//! `red green blue` (uchar), optional integer `label` and optional `saliency`.
//! Other properties and elements are skipped.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;

use super::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn is_float(self) -> bool {
        matches!(self, Scalar::F32 | Scalar::F64)
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// Parsed file: the cloud plus any stored saliency.
#[derive(Clone, Debug, PartialEq)]
pub struct PlyFile {
    pub cloud: PointCloud,
    pub saliency: Option<Vec<f64>>,
}

/// Vertex column index of each recognized property.
#[derive(Default)]
struct Columns {
    xyz: [Option<usize>; 3],
    rgb: [Option<usize>; 3],
    label: Option<usize>,
    saliency: Option<usize>,
}

pub fn parse_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    Ok(read_ply(path)?.cloud)
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PlyFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply_bytes(&bytes, &path.display().to_string())
}

/// Parses PLY content; `name` labels errors.
pub fn parse_ply_bytes(bytes: &[u8], name: &str) -> Result<PlyFile> {
    let err = |location: String, message: String| Error::Parse {
        path: name.to_string(),
        location,
        message,
    };
    let (format, elements, body_start) = parse_header(bytes, &err)?;
    let vi = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| err("header".into(), "no vertex element".into()))?;
    let cols = vertex_columns(&elements[vi], &err)?;
    let rows = match format {
        Format::Ascii => read_ascii(bytes, body_start, &elements, vi, &err)?,
        Format::BinaryLe => read_binary(bytes, body_start, &elements, vi, &err)?,
    };
    assemble(rows, &cols, name)
}

type ErrFn<'a> = dyn Fn(String, String) -> Error + 'a;

fn parse_header(bytes: &[u8], err: &ErrFn) -> Result<(Format, Vec<Element>, usize)> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err(format!("line {}", line_no + 1), "header is not terminated by end_header".into()))?;
        let raw = &bytes[pos..pos + end];
        pos += end + 1;
        line_no += 1;
        let at = || format!("line {line_no}");
        let line = std::str::from_utf8(raw)
            .map_err(|_| err(at(), "header is not valid UTF-8".into()))?
            .trim_end_matches('\r');
        let words: Vec<&str> = line.split_whitespace().collect();
        if line_no == 1 {
            if words != ["ply"] {
                return Err(err(at(), "missing `ply` magic".into()));
            }
            continue;
        }
        match words.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", f, version] => {
                if format.is_some() {
                    return Err(err(at(), "duplicate format line".into()));
                }
                if *version != "1.0" {
                    return Err(err(at(), format!("unsupported version `{version}`")));
                }
                format = Some(match *f {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::BinaryLe,
                    other => return Err(err(at(), format!("unsupported format `{other}`"))),
                });
            }
            ["element", name, count] => {
                let count = count
                    .parse::<usize>()
                    .map_err(|_| err(at(), format!("bad element count `{count}`")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            ["property", "list", count, item, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err(at(), "property before any element".into()))?;
                let (Some(count), Some(item)) = (Scalar::parse(count), Scalar::parse(item)) else {
                    return Err(err(at(), format!("unsupported list type `{count} {item}`")));
                };
                if count.is_float() {
                    return Err(err(at(), "list count must be an integer type".into()));
                }
                el.props.push(Property::List {
                    name: name.to_string(),
                    count,
                    item,
                });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err(at(), "property before any element".into()))?;
                let ty = Scalar::parse(ty).ok_or_else(|| err(at(), format!("unsupported property type `{ty}`")))?;
                el.props.push(Property::Scalar {
                    name: name.to_string(),
                    ty,
                });
            }
            ["end_header"] => break,
            _ => return Err(err(at(), format!("unrecognized header line `{line}`"))),
        }
    }
    let format = format.ok_or_else(|| err("header".into(), "missing format line".into()))?;
    Ok((format, elements, pos))
}

fn vertex_columns(el: &Element, err: &ErrFn) -> Result<Columns> {
    let mut cols = Columns::default();
    // rows keep scalar properties only, so index among scalars
    let scalars = el.props.iter().filter_map(|p| match p {
        Property::Scalar { name, ty } => Some((name, ty)),
        Property::List { .. } => None,
    });
    for (i, (name, ty)) in scalars.enumerate() {
        let slot = match name.as_str() {
            "x" => &mut cols.xyz[0],
            "y" => &mut cols.xyz[1],
            "z" => &mut cols.xyz[2],
            "red" => &mut cols.rgb[0],
            "green" => &mut cols.rgb[1],
            "blue" => &mut cols.rgb[2],
            "label" => &mut cols.label,
            "saliency" => &mut cols.saliency,
            _ => continue,
        };
        let ok = match name.as_str() {
            "x" | "y" | "z" | "saliency" => ty.is_float(),
            "red" | "green" | "blue" => *ty == Scalar::U8,
            _ => !ty.is_float(),
        };
        if !ok {
            return Err(err("header".into(), format!("unsupported type {ty:?} for property `{name}`")));
        }
        if slot.replace(i).is_some() {
            return Err(err("header".into(), format!("duplicate property `{name}`")));
        }
    }
    if cols.xyz.iter().any(Option::is_none) {
        return Err(err("header".into(), "vertex element needs x, y and z".into()));
    }
    let rgb = cols.rgb.iter().filter(|c| c.is_some()).count();
    if rgb != 0 && rgb != 3 {
        return Err(err("header".into(), "red, green and blue must appear together".into()));
    }
    Ok(cols)
}

/// Scalar values of each vertex row (list properties are dropped).
type Rows = Vec<Vec<f64>>;

fn read_ascii(bytes: &[u8], start: usize, elements: &[Element], vi: usize, err: &ErrFn) -> Result<Rows> {
    let body = std::str::from_utf8(&bytes[start..]).map_err(|_| err("body".into(), "ASCII body is not valid UTF-8".into()))?;
    let header_lines = bytes[..start].iter().filter(|&&b| b == b'\n').count();
    let mut lines = body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut rows = Vec::new();
    for (e, el) in elements.iter().enumerate() {
        for r in 0..el.count {
            let (i, line) = lines
                .next()
                .ok_or_else(|| err("end of file".into(), format!("element `{}` has {} of {} rows", el.name, r, el.count)))?;
            let at = || format!("line {}", header_lines + i + 1);
            let mut tokens = line.split_whitespace();
            let mut next = |what: &str| -> Result<f64> {
                let t = tokens.next().ok_or_else(|| err(at(), format!("missing value for `{what}`")))?;
                t.parse::<f64>().map_err(|_| err(at(), format!("bad number `{t}` for `{what}`")))
            };
            let mut row = Vec::new();
            for p in &el.props {
                match p {
                    // narrow to the declared width so ASCII and binary agree
                    Property::Scalar { name, ty: Scalar::F32 } => row.push(f64::from(next(name)? as f32)),
                    Property::Scalar { name, .. } => row.push(next(name)?),
                    Property::List { name, .. } => {
                        let n = next(name)?;
                        if n < 0.0 || n.fract() != 0.0 || n > 1e6 {
                            return Err(err(at(), format!("bad list length for `{name}`")));
                        }
                        for _ in 0..n as usize {
                            next(name)?;
                        }
                    }
                }
            }
            if tokens.next().is_some() {
                return Err(err(at(), "extra values on row".into()));
            }
            if e == vi {
                row.shrink_to_fit();
                rows.push(row);
            }
        }
    }
    if let Some((i, _)) = lines.next() {
        return Err(err(format!("line {}", header_lines + i + 1), "data after the last element".into()));
    }
    Ok(rows)
}

fn read_binary(bytes: &[u8], start: usize, elements: &[Element], vi: usize, err: &ErrFn) -> Result<Rows> {
    let mut pos = start;
    let mut rows = Vec::new();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if bytes.len() - *pos < n {
            return Err(err(format!("byte {}", *pos), "unexpected end of file".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    for (e, el) in elements.iter().enumerate() {
        let fixed: Option<usize> = el
            .props
            .iter()
            .map(|p| match p {
                Property::Scalar { ty, .. } => Some(ty.size()),
                Property::List { .. } => None,
            })
            .sum();
        if let Some(row_size) = fixed {
            // refuse counts the remaining bytes cannot hold before allocating anything
            let need = row_size.checked_mul(el.count);
            if need.is_none_or(|n| n > bytes.len() - pos) {
                return Err(err(format!("byte {pos}"), format!("element `{}` runs past the end of file", el.name)));
            }
            if row_size == 0 && e != vi {
                continue;
            }
        }
        for _ in 0..el.count {
            let mut row = Vec::new();
            for p in &el.props {
                match p {
                    Property::Scalar { ty, .. } => row.push(ty.read_le(take(&mut pos, ty.size())?)),
                    Property::List { count, item, name } => {
                        let at = pos;
                        let n = count.read_le(take(&mut pos, count.size())?);
                        if n < 0.0 {
                            return Err(err(format!("byte {at}"), format!("negative list length for `{name}`")));
                        }
                        take(&mut pos, n as usize * item.size())?;
                    }
                }
            }
            if e == vi {
                rows.push(row);
            }
        }
    }
    if pos != bytes.len() {
        return Err(err(format!("byte {pos}"), "data after the last element".into()));
    }
    Ok(rows)
}

fn assemble(rows: Rows, cols: &Columns, name: &str) -> Result<PlyFile> {
    let [x, y, z] = cols.xyz.map(Option::unwrap);
    let coords: Vec<[f64; 3]> = rows.iter().map(|r| [r[x], r[y], r[z]]).collect();
    let colors = match cols.rgb {
        [Some(r), Some(g), Some(b)] => rows.iter().map(|row| [row[r] / 255.0, row[g] / 255.0, row[b] / 255.0]).collect(),
        _ => vec![[0.5; 3]; rows.len()],
    };
    let labels = cols.label.map(|c| rows.iter().map(|r| r[c] != 0.0).collect());
    let saliency = cols.saliency.map(|c| rows.iter().map(|r| r[c]).collect());
    let cloud = PointCloud::new(coords, colors, labels).map_err(|e| Error::Parse {
        path: name.to_string(),
        location: "vertex data".into(),
        message: e.to_string(),
    })?;
    Ok(PlyFile { cloud, saliency })
}

/// Blue (p = 0) to red (p = 1) ramp.
pub fn heat_color(p: f64) -> [u8; 3] {
    let p = p.clamp(0.0, 1.0);
    [(255.0 * p).round() as u8, 0, (255.0 * (1.0 - p)).round() as u8]
}

fn to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `cloud`; with `probabilities`, colors become a heat map and a
/// `saliency` property is added.
pub fn write_ply(cloud: &PointCloud, probabilities: Option<&[f64]>, path: impl AsRef<Path>, binary: bool) -> Result<()> {
    let bytes = ply_bytes(cloud, probabilities, binary)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn ply_bytes(cloud: &PointCloud, probabilities: Option<&[f64]>, binary: bool) -> Result<Vec<u8>> {
    if let Some(p) = probabilities {
        if p.len() != cloud.len() {
            return Err(Error::Dimension {
                op: "write_ply probabilities",
                lhs: vec![cloud.len()],
                rhs: vec![p.len()],
            });
        }
    }
    let mut head = String::from("ply\n");
    head += if binary {
        "format binary_little_endian 1.0\n"
    } else {
        "format ascii 1.0\n"
    };
    writeln!(head, "element vertex {}", cloud.len()).unwrap();
    head += "property double x\nproperty double y\nproperty double z\n";
    head += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    if cloud.labels.is_some() {
        head += "property uchar label\n";
    }
    if probabilities.is_some() {
        head += "property float saliency\n";
    }
    head += "end_header\n";

    let mut out = head.into_bytes();
    for i in 0..cloud.len() {
        let rgb = match probabilities {
            Some(p) => heat_color(p[i]),
            None => cloud.colors[i].map(to_u8),
        };
        let label = cloud.labels.as_ref().map(|l| l[i] as u8);
        let sal = probabilities.map(|p| p[i] as f32);
        if binary {
            for v in cloud.coords[i] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&rgb);
            out.extend(label);
            if let Some(s) = sal {
                out.extend_from_slice(&s.to_le_bytes());
            }
        } else {
            let [x, y, z] = cloud.coords[i];
            let mut line = format!("{x:?} {y:?} {z:?} {} {} {}", rgb[0], rgb[1], rgb[2]);
            if let Some(l) = label {
                write!(line, " {l}").unwrap();
            }
            if let Some(s) = sal {
                write!(line, " {s:?}").unwrap();
            }
            line.push('\n');
            out.extend_from_slice(line.as_bytes());
        }
    }
    Ok(out)
}
