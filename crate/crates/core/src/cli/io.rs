//! ASCII cloud files, ambiguity CSV, colored PLY and binary checkpoints.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use crate::autograd::Tensor;
use crate::cloudgeom::{Point3, PointCloud};
use crate::error::{Error, Result};

use super::config::{parse_config, Config};

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// C `%.9g`: nine significant digits, trailing zeros dropped, exponent
/// form outside `[1e-4, 1e9)`.
pub fn fmt_g9(v: f64) -> String {
    const P: i32 = 9;
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.into();
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0" } else { "0" }.into();
    }
    let sci = format!("{:.*e}", (P - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..P).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        trim(&format!("{:.*}", (P - 1 - exp) as usize, v))
    }
}

/// `x y z [feat...] label`; the class count is one past the largest label.
pub fn parse_cloud(text: &str) -> Result<PointCloud> {
    let mut positions = Vec::new();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() < 4 {
            return Err(format_err(format!(
                "line {}: expected x y z [feat...] label",
                i + 1
            )));
        }
        match width {
            None => width = Some(tokens.len()),
            Some(w) if w != tokens.len() => {
                return Err(format_err(format!(
                    "line {}: {} tokens, earlier lines have {w}",
                    i + 1,
                    tokens.len()
                )))
            }
            _ => {}
        }
        let num = |t: &str| {
            t.parse::<f64>()
                .map_err(|_| format_err(format!("line {}: bad number {t:?}", i + 1)))
        };
        let (label, values) = tokens.split_last().expect("at least four tokens");
        let label: usize = label
            .parse()
            .map_err(|_| format_err(format!("line {}: label {label:?} is not a class index", i + 1)))?;
        positions.push([num(values[0])?, num(values[1])?, num(values[2])?]);
        for t in &values[3..] {
            features.push(num(t)?);
        }
        labels.push(label);
    }
    let Some(w) = width else {
        return Err(format_err("cloud file has no points"));
    };
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    PointCloud::with_features(positions, features, w - 4, labels, classes)
}

/// Shortest round-trip decimal per value, so parsing recovers the cloud
/// exactly.
pub fn format_cloud(cloud: &PointCloud) -> String {
    let mut s = String::from("# x y z");
    for f in 0..cloud.feature_dim() {
        write!(s, " f{f}").expect("write to string");
    }
    s.push_str(" label\n");
    for (i, p) in cloud.positions().iter().enumerate() {
        write!(s, "{} {} {}", p[0], p[1], p[2]).expect("write to string");
        for v in cloud.feature(i) {
            write!(s, " {v}").expect("write to string");
        }
        writeln!(s, " {}", cloud.labels()[i]).expect("write to string");
    }
    s
}

pub fn ambiguity_csv(positions: &[Point3], ambiguity: &[f64], margins: &[f64]) -> String {
    let mut s = String::from("index,x,y,z,ambiguity,margin\n");
    for (i, ((p, a), m)) in positions.iter().zip(ambiguity).zip(margins).enumerate() {
        writeln!(
            s,
            "{i},{},{},{},{},{}",
            fmt_g9(p[0]),
            fmt_g9(p[1]),
            fmt_g9(p[2]),
            fmt_g9(*a),
            fmt_g9(*m)
        )
        .expect("write to string");
    }
    s
}

/// Red rises and blue falls with ambiguity.
pub fn ambiguity_color(a: f64) -> [u8; 3] {
    let c = (255.0 * a.clamp(0.0, 1.0)).round() as u8;
    [c, 0, 255 - c]
}

pub fn format_ply(positions: &[Point3], ambiguity: &[f64]) -> String {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        positions.len()
    );
    for (p, &a) in positions.iter().zip(ambiguity) {
        let [r, g, b] = ambiguity_color(a);
        writeln!(
            s,
            "{} {} {} {r} {g} {b}",
            fmt_g9(p[0]),
            fmt_g9(p[1]),
            fmt_g9(p[2])
        )
        .expect("write to string");
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlyVertex {
    pub position: Point3,
    pub color: [u8; 3],
}

/// Reads ASCII PLY vertices carrying x, y, z and red, green, blue in any
/// property order; other elements and properties are skipped.
pub fn parse_ply(text: &str) -> Result<Vec<PlyVertex>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(format_err("missing ply magic"));
    }
    // (name, count, properties) per element
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    loop {
        let line = lines
            .next()
            .ok_or_else(|| format_err("header has no end_header"))?;
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(format_err(format!("unsupported ply format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| format_err(format!("bad element count {count:?}")))?;
                elements.push((name.to_string(), count, Vec::new()));
            }
            ["property", "list", ..] => return Err(format_err("list properties are not supported")),
            ["property", _, name] => elements
                .last_mut()
                .ok_or_else(|| format_err("property before any element"))?
                .2
                .push(name.to_string()),
            _ => return Err(format_err(format!("unrecognized header line {line:?}"))),
        }
    }
    let mut vertices = Vec::new();
    for (name, count, props) in &elements {
        if name != "vertex" {
            for _ in 0..*count {
                lines.next().ok_or_else(|| format_err("truncated ply body"))?;
            }
            continue;
        }
        let col = |p: &str| {
            props
                .iter()
                .position(|q| q == p)
                .ok_or_else(|| format_err(format!("vertex has no {p} property")))
        };
        let cols = [
            col("x")?,
            col("y")?,
            col("z")?,
            col("red")?,
            col("green")?,
            col("blue")?,
        ];
        for _ in 0..*count {
            let line = lines.next().ok_or_else(|| format_err("truncated ply body"))?;
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != props.len() {
                return Err(format_err(format!("vertex line {line:?} has {} values", t.len())));
            }
            let f = |c: usize| {
                t[c].parse::<f64>()
                    .map_err(|_| format_err(format!("bad float {:?}", t[c])))
            };
            let u = |c: usize| {
                t[c].parse::<u8>()
                    .map_err(|_| format_err(format!("bad uchar {:?}", t[c])))
            };
            vertices.push(PlyVertex {
                position: [f(cols[0])?, f(cols[1])?, f(cols[2])?],
                color: [u(cols[3])?, u(cols[4])?, u(cols[5])?],
            });
        }
    }
    Ok(vertices)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMC3";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| format_err("length does not fit in 32 bits"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Little-endian throughout: magic, version, config text, tensor count,
/// then per tensor its name, rank, `u64` dims and `f64` values.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = ckpt.config.to_text();
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, ckpt.tensors.len())?;
    for (name, t) in &ckpt.tensors {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(format_err("checkpoint is truncated"));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| format_err("dimension does not fit in memory"))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| format_err("checkpoint text is not UTF-8"))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(format_err("not a checkpoint: bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(format_err(format!("unsupported checkpoint version {version}")));
    }
    let config = parse_config(&r.text()?)?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.text()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.bytes.len()))
            .ok_or_else(|| format_err(format!("tensor {name} overruns the checkpoint")))?;
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if !r.bytes.is_empty() {
        return Err(format_err("trailing bytes after the last tensor"));
    }
    Ok(Checkpoint { config, tensors })
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(file_err(path))?;
    Ok(buf)
}

pub fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_file(path)?).map_err(|_| format_err(format!("{} is not UTF-8", path.display())))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(file_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g9_matches_c() {
        for (v, s) in [
            (0.0, "0"),
            (1.0, "1"),
            (0.5, "0.5"),
            (-1.25, "-1.25"),
            (1.0 / 3.0, "0.333333333"),
            (123456789.0, "123456789"),
            (1234567890.0, "1.23456789e+09"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (2.0 / 3.0 * 1e-7, "6.66666667e-08"),
            (999999999.5, "1e+09"),
            (1e100, "1e+100"),
        ] {
            assert_eq!(fmt_g9(v), s, "{v}");
        }
    }

    #[test]
    fn cloud_round_trip() {
        let cloud = PointCloud::with_features(
            vec![[0.1, -2.0, 3.5e-9], [1.0 / 3.0, 0.0, 7.0]],
            vec![0.25, 1.0],
            1,
            vec![1, 0],
            2,
        )
        .unwrap();
        assert_eq!(parse_cloud(&format_cloud(&cloud)).unwrap(), cloud);
    }

    #[test]
    fn cloud_errors() {
        assert!(parse_cloud("# only comments\n").is_err());
        assert!(parse_cloud("0 0 0 1\n0 0 1\n").is_err());
        assert!(parse_cloud("0 0 0 1\n0 0 0 1 1\n").is_err());
        assert!(parse_cloud("0 0 0 1.5\n").is_err());
        assert!(parse_cloud("0 0 x 1\n").is_err());
        let c = parse_cloud("# c\n0 0 0 2\n\n1 0 0 0\n").unwrap();
        assert_eq!((c.len(), c.num_classes()), (2, 3));
    }

    #[test]
    fn colormap() {
        assert_eq!(ambiguity_color(0.0), [0, 0, 255]);
        assert_eq!(ambiguity_color(1.0), [255, 0, 0]);
        assert_eq!(ambiguity_color(0.5), [128, 0, 127]);
    }

    #[test]
    fn ply_round_trip() {
        let pos = vec![[0.5, -1.0, 2.25], [1e-3, 4.0, 0.0]];
        let amb = [0.2, 0.9];
        let v = parse_ply(&format_ply(&pos, &amb)).unwrap();
        assert_eq!(v.len(), 2);
        for ((p, a), vert) in pos.iter().zip(amb).zip(&v) {
            assert_eq!(&vert.position, p);
            assert_eq!(vert.color, ambiguity_color(a));
        }
        assert!(parse_ply("nope").is_err());
        assert!(parse_ply("ply\nformat binary_little_endian 1.0\nend_header\n").is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let csv = ambiguity_csv(&[[0.0, 1.0, 2.0]], &[0.25], &[0.25]);
        assert_eq!(csv, "index,x,y,z,ambiguity,margin\n0,0,1,2,0.25,0.25\n");
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let ckpt = Checkpoint {
            config: Config::default(),
            tensors: vec![
                (
                    "a.weight".into(),
                    Tensor::matrix(2, 2, vec![1.0, -0.5, 1e-300, 3.0]).unwrap(),
                ),
                ("a.bias".into(), Tensor::new(vec![2], vec![0.1, 0.2]).unwrap()),
            ],
        };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        assert_eq!(&bytes[..4], b"AMC3");
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(decode_checkpoint(&magic).is_err());
    }
}
