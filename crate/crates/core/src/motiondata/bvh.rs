//! BVH text format: parsing, raw re-serialization and clip export.

use std::fmt::Write as _;

use crate::error::{ensure, Error, Result};
use crate::geometry::{identity, mat_mul, mat_to_zxy, rot_axis, Axis, Mat3, Vec3};
use crate::scalar::Scalar;

use super::kinematics::{decode_root, WorldMotion};
use super::skeleton::SkeletonDef;
use super::MotionClip;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Position(Axis),
    Rotation(Axis),
}

impl Channel {
    fn parse(s: &str) -> Option<Self> {
        let mut chars = s.chars();
        let axis = match chars.next()? {
            'X' | 'x' => Axis::X,
            'Y' | 'y' => Axis::Y,
            'Z' | 'z' => Axis::Z,
            _ => return None,
        };
        match chars.as_str().to_ascii_lowercase().as_str() {
            "position" => Some(Channel::Position(axis)),
            "rotation" => Some(Channel::Rotation(axis)),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Channel::Position(Axis::X) => "Xposition",
            Channel::Position(Axis::Y) => "Yposition",
            Channel::Position(Axis::Z) => "Zposition",
            Channel::Rotation(Axis::X) => "Xrotation",
            Channel::Rotation(Axis::Y) => "Yrotation",
            Channel::Rotation(Axis::Z) => "Zrotation",
        }
    }
}

/// A parsed BVH file. Rotation channel values are stored in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct BvhFile {
    pub skeleton: SkeletonDef,
    pub channels: Vec<Vec<Channel>>,
    pub frame_time: f64,
    pub frames: Vec<Vec<f64>>,
}

struct Tokens<'a> {
    items: Vec<(usize, &'a str)>,
    pos: usize,
    last_line: usize,
}

impl<'a> Tokens<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        let t = self.items.get(self.pos).copied().ok_or(Error::Bvh {
            line: self.last_line,
            message: "unexpected end of hierarchy".into(),
        })?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, want: &str) -> Result<usize> {
        let (line, tok) = self.next()?;
        ensure!(
            tok.eq_ignore_ascii_case(want),
            Error::Bvh { line, message: format!("expected '{want}', found '{tok}'") }
        );
        Ok(line)
    }

    fn number(&mut self) -> Result<f64> {
        let (line, tok) = self.next()?;
        let v: f64 = tok
            .parse()
            .map_err(|_| Error::Bvh { line, message: format!("'{tok}' is not a number") })?;
        ensure!(v.is_finite(), Error::Bvh { line, message: format!("non-finite value '{tok}'") });
        Ok(v)
    }

    fn vec3(&mut self) -> Result<Vec3<f64>> {
        Ok([self.number()?, self.number()?, self.number()?])
    }
}

struct Builder {
    skeleton: SkeletonDef,
    channels: Vec<Vec<Channel>>,
}

impl Builder {
    fn joint(&mut self, toks: &mut Tokens<'_>, parent: i32) -> Result<()> {
        let (line, name) = toks.next()?;
        ensure!(
            name != "{" && name != "}",
            Error::Bvh { line, message: "missing joint name".into() }
        );
        let index = self.skeleton.joint_names.len();
        toks.expect("{")?;
        toks.expect("OFFSET")?;
        let offset = toks.vec3()?;
        toks.expect("CHANNELS")?;
        let (line, count) = toks.next()?;
        let count: usize = count
            .parse()
            .map_err(|_| Error::Bvh { line, message: format!("bad channel count '{count}'") })?;
        ensure!(count <= 6, Error::Bvh { line, message: format!("{count} channels (at most 6)") });
        let mut chans = Vec::with_capacity(count);
        for _ in 0..count {
            let (line, c) = toks.next()?;
            chans.push(
                Channel::parse(c)
                    .ok_or(Error::Bvh { line, message: format!("unknown channel '{c}'") })?,
            );
        }
        self.skeleton.joint_names.push(name.to_string());
        self.skeleton.parent_index.push(parent);
        self.skeleton.offsets.push(offset);
        self.skeleton.end_sites.push(None);
        self.channels.push(chans);
        loop {
            let (line, tok) = toks.next()?;
            match tok.to_ascii_uppercase().as_str() {
                "JOINT" => self.joint(toks, index as i32)?,
                "END" => {
                    toks.expect("Site")?;
                    toks.expect("{")?;
                    toks.expect("OFFSET")?;
                    let e = toks.vec3()?;
                    toks.expect("}")?;
                    self.skeleton.end_sites[index] = Some(e);
                }
                "}" => return Ok(()),
                _ => {
                    return Err(Error::Bvh { line, message: format!("unexpected '{tok}' in joint {name}") })
                }
            }
        }
    }
}

/// Parses BVH text. Every failure carries the 1-based line it was detected on.
pub fn parse_bvh(text: &str) -> Result<BvhFile> {
    let lines: Vec<&str> = text.lines().collect();
    let motion_at = lines
        .iter()
        .position(|l| l.trim().eq_ignore_ascii_case("MOTION"))
        .ok_or(Error::Bvh { line: lines.len(), message: "missing MOTION section".into() })?;

    let items = lines[..motion_at]
        .iter()
        .enumerate()
        .flat_map(|(i, l)| l.split_whitespace().map(move |t| (i + 1, t)))
        .collect();
    let mut toks = Tokens { items, pos: 0, last_line: motion_at + 1 };
    toks.expect("HIERARCHY")?;
    toks.expect("ROOT")?;
    let mut b = Builder {
        skeleton: SkeletonDef {
            joint_names: vec![],
            parent_index: vec![],
            offsets: vec![],
            foot_joint_indices: vec![],
            end_sites: vec![],
        },
        channels: vec![],
    };
    b.joint(&mut toks, -1)?;
    if let Some(&(line, tok)) = toks.items.get(toks.pos) {
        return Err(Error::Bvh { line, message: format!("unexpected '{tok}' after root joint") });
    }

    let mut rest = lines.iter().enumerate().skip(motion_at + 1).filter(|(_, l)| !l.trim().is_empty());
    let header = |entry: Option<(usize, &&str)>, key: &str| -> Result<(usize, String)> {
        let (i, l) = entry.ok_or(Error::Bvh { line: lines.len(), message: format!("missing '{key}'") })?;
        let l = l.trim();
        ensure!(
            l.to_ascii_lowercase().starts_with(&key.to_ascii_lowercase()),
            Error::Bvh { line: i + 1, message: format!("expected '{key}', found '{l}'") }
        );
        Ok((i + 1, l[key.len()..].trim().to_string()))
    };
    let (line, n) = header(rest.next(), "Frames:")?;
    let declared: usize =
        n.parse().map_err(|_| Error::Bvh { line, message: format!("bad frame count '{n}'") })?;
    let (line, dt) = header(rest.next(), "Frame Time:")?;
    let frame_time: f64 =
        dt.parse().map_err(|_| Error::Bvh { line, message: format!("bad frame time '{dt}'") })?;
    ensure!(
        frame_time.is_finite() && frame_time > 0.0,
        Error::Bvh { line, message: format!("frame time must be positive, got {frame_time}") }
    );

    let width: usize = b.channels.iter().map(Vec::len).sum();
    let is_rot: Vec<bool> =
        b.channels.iter().flatten().map(|c| matches!(c, Channel::Rotation(_))).collect();
    let mut frames = Vec::with_capacity(declared.min(1 << 16));
    let mut last_line = line;
    for (i, l) in rest {
        last_line = i + 1;
        let mut row = Vec::with_capacity(width);
        for tok in l.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::Bvh {
                line: i + 1,
                message: format!("'{tok}' is not a number"),
            })?;
            ensure!(v.is_finite(), Error::Bvh { line: i + 1, message: format!("non-finite value '{tok}'") });
            row.push(v);
        }
        ensure!(
            row.len() == width,
            Error::Bvh { line: i + 1, message: format!("{} values, expected {width} channels", row.len()) }
        );
        for (v, &r) in row.iter_mut().zip(&is_rot) {
            if r {
                *v = v.to_radians();
            }
        }
        frames.push(row);
    }
    ensure!(
        frames.len() == declared,
        Error::Bvh {
            line: last_line,
            message: format!("header declares {declared} frames but {} are present", frames.len()),
        }
    );

    let mut skeleton = b.skeleton;
    skeleton.detect_feet();
    skeleton.validate().map_err(|e| Error::Bvh { line: 1, message: e.to_string() })?;
    Ok(BvhFile { skeleton, channels: b.channels, frame_time, frames })
}

impl BvhFile {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Root position and local joint rotation matrices for every frame.
    pub fn to_world(&self) -> WorldMotion {
        let nj = self.skeleton.num_joints();
        let mut root_pos = Vec::with_capacity(self.frames.len());
        let mut rotations = Vec::with_capacity(self.frames.len());
        for row in &self.frames {
            let mut k = 0;
            let mut rots = Vec::with_capacity(nj);
            for (j, chans) in self.channels.iter().enumerate() {
                let mut t = self.skeleton.offsets[j];
                let mut m: Mat3<f64> = identity();
                for &c in chans {
                    let v = row[k];
                    k += 1;
                    match c {
                        Channel::Position(a) => t[a as usize] = v,
                        Channel::Rotation(a) => {
                            m = mat_mul(&m, &rot_axis(a, v))
                        }
                    }
                }
                if j == 0 {
                    root_pos.push(t);
                }
                rots.push(m);
            }
            rotations.push(rots);
        }
        WorldMotion { root_pos, rotations }
    }
}

fn write_hierarchy(out: &mut String, skel: &SkeletonDef, channels: &[Vec<Channel>]) {
    fn rec(out: &mut String, skel: &SkeletonDef, channels: &[Vec<Channel>], j: usize, depth: usize) {
        let pad = "  ".repeat(depth);
        let kw = if depth == 0 { "ROOT" } else { "JOINT" };
        let [x, y, z] = skel.offsets[j];
        let _ = writeln!(out, "{pad}{kw} {}", skel.joint_names[j]);
        let _ = writeln!(out, "{pad}{{");
        let _ = writeln!(out, "{pad}  OFFSET {x:.6} {y:.6} {z:.6}");
        let names: Vec<&str> = channels[j].iter().map(|c| c.name()).collect();
        let _ = writeln!(out, "{pad}  CHANNELS {} {}", names.len(), names.join(" "));
        for c in skel.children(j) {
            rec(out, skel, channels, c, depth + 1);
        }
        if let Some([x, y, z]) = skel.end_sites[j] {
            let _ = writeln!(out, "{pad}  End Site\n{pad}  {{\n{pad}    OFFSET {x:.6} {y:.6} {z:.6}\n{pad}  }}");
        }
        let _ = writeln!(out, "{pad}}}");
    }
    out.push_str("HIERARCHY\n");
    rec(out, skel, channels, 0, 0);
}

fn write_frames(out: &mut String, frame_time: f64, frames: &[Vec<f64>], is_rot: &[bool]) {
    let _ = writeln!(out, "MOTION\nFrames: {}\nFrame Time: {frame_time:.8}", frames.len());
    for row in frames {
        let mut first = true;
        for (&v, &r) in row.iter().zip(is_rot) {
            if !first {
                out.push(' ');
            }
            first = false;
            let v = if r { v.to_degrees() } else { v };
            let _ = write!(out, "{v:.6}");
        }
        out.push('\n');
    }
}

/// Writes a parsed file back out with its original channel layout.
pub fn write_bvh_file(file: &BvhFile) -> String {
    let mut out = String::new();
    write_hierarchy(&mut out, &file.skeleton, &file.channels);
    let is_rot: Vec<bool> =
        file.channels.iter().flatten().map(|c| matches!(c, Channel::Rotation(_))).collect();
    write_frames(&mut out, file.frame_time, &file.frames, &is_rot);
    out
}

/// The layout [`serialize_bvh`] writes: root translation then `Z X Y` rotations.
pub fn standard_channels(skel: &SkeletonDef) -> Vec<Vec<Channel>> {
    let rot = [Channel::Rotation(Axis::Z), Channel::Rotation(Axis::X), Channel::Rotation(Axis::Y)];
    (0..skel.num_joints())
        .map(|j| {
            let mut c = Vec::new();
            if j == 0 {
                c.extend([Axis::X, Axis::Y, Axis::Z].map(Channel::Position));
            }
            c.extend(rot);
            c
        })
        .collect()
}

/// Renders a (de-normalized) clip as BVH. The root path is integrated from
/// the planar origin with the clip's initial heading.
pub fn serialize_bvh<T: Scalar>(skel: &SkeletonDef, clip: &MotionClip<T>, frame_time: f64) -> Result<String> {
    ensure!(
        clip.num_joints == skel.num_joints(),
        Error::Shape(format!("clip has {} joints, skeleton {}", clip.num_joints, skel.num_joints()))
    );
    let file = clip_to_bvh(skel, clip, frame_time);
    Ok(write_bvh_file(&file))
}

/// Builds a [`BvhFile`] with [`standard_channels`] from a clip.
pub fn clip_to_bvh<T: Scalar>(skel: &SkeletonDef, clip: &MotionClip<T>, frame_time: f64) -> BvhFile {
    let nj = clip.num_joints;
    let (root_pos, root_rot) = decode_root(clip, frame_time);
    let frames = (0..clip.num_frames)
        .map(|f| {
            let mut row = Vec::with_capacity(3 + 3 * nj);
            row.extend(root_pos[f]);
            row.extend(mat_to_zxy(&root_rot[f]));
            for j in 1..nj {
                row.extend(clip.joint_angles(f, j));
            }
            row
        })
        .collect();
    BvhFile { skeleton: skel.clone(), channels: standard_channels(skel), frame_time, frames }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_JOINT: &str = "HIERARCHY
ROOT Hips
{
  OFFSET 0 0 0
  CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation
  JOINT Leg
  {
    OFFSET 0 -1 0
    CHANNELS 3 Zrotation Xrotation Yrotation
    End Site
    {
      OFFSET 0 -1 0
    }
  }
}
MOTION
Frames: 1
Frame Time: 0.0333333
0 0 0 0 0 0 0 0 0
";

    #[test]
    fn minimal_file() {
        let f = parse_bvh(TWO_JOINT).unwrap();
        assert_eq!(f.skeleton.num_joints(), 2);
        assert_eq!(f.frames, vec![vec![0.0; 9]]);
        assert_eq!(f.skeleton.end_sites[1], Some([0.0, -1.0, 0.0]));
        let again = parse_bvh(&write_bvh_file(&f)).unwrap();
        assert_eq!(again.skeleton, f.skeleton);
        assert_eq!(again.channels, f.channels);
    }

    #[test]
    fn frame_count_mismatch_names_both_counts() {
        let text = TWO_JOINT.replace("Frames: 1", "Frames: 2");
        let err = parse_bvh(&text).unwrap_err().to_string();
        assert!(err.contains("declares 2 frames but 1"), "{err}");
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = TWO_JOINT.replace("OFFSET 0 -1 0\n    CHANNELS", "OFFSET 0 oops 0\n    CHANNELS");
        match parse_bvh(&text) {
            Err(Error::Bvh { line, .. }) => assert_eq!(line, 8),
            other => panic!("{other:?}"),
        }
        let text = TWO_JOINT.replace("0 0 0 0 0 0 0 0 0", "0 0 0 0 0 0 0 0");
        match parse_bvh(&text) {
            Err(Error::Bvh { line, message }) => {
                assert_eq!(line, 19);
                assert!(message.contains("expected 9"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn degrees_become_radians() {
        let text = TWO_JOINT.replace("0 0 0 0 0 0 0 0 0", "1 2 3 90 0 0 0 45 0");
        let f = parse_bvh(&text).unwrap();
        assert_eq!(&f.frames[0][..3], &[1.0, 2.0, 3.0]);
        assert!((f.frames[0][3] - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert!((f.frames[0][7] - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn frames_survive_a_write_and_parse(vals in proptest::collection::vec(-179.0f64..179.0, 18)) {
            let mut text = TWO_JOINT.replace("Frames: 1", "Frames: 2");
            let rows: Vec<String> = vals.chunks(9).map(|r| r.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(" ")).collect();
            text = text.replace("0 0 0 0 0 0 0 0 0", &rows.join("\n"));
            let a = parse_bvh(&text).unwrap();
            let b = parse_bvh(&write_bvh_file(&a)).unwrap();
            for (x, y) in a.frames.iter().flatten().zip(b.frames.iter().flatten()) {
                proptest::prop_assert!((x - y).abs().to_degrees() < 1e-4);
            }
        }

        #[test]
        fn fuzzed_input_is_rejected_or_consistent(edits in proptest::collection::vec((0usize..400, 0u8..128, 0u8..3), 1..6)) {
            let mut bytes = TWO_JOINT.as_bytes().to_vec();
            for (at, byte, kind) in edits {
                let at = at % bytes.len().max(1);
                match kind {
                    0 if !bytes.is_empty() => bytes[at] = byte,
                    1 => bytes.insert(at.min(bytes.len()), byte),
                    _ if !bytes.is_empty() => { bytes.remove(at); }
                    _ => {}
                }
            }
            if let Ok(f) = parse_bvh(&String::from_utf8_lossy(&bytes)) {
                let width: usize = f.channels.iter().map(Vec::len).sum();
                proptest::prop_assert!(f.skeleton.validate().is_ok());
                proptest::prop_assert_eq!(f.channels.len(), f.skeleton.num_joints());
                proptest::prop_assert!(f.frame_time > 0.0);
                proptest::prop_assert!(f.frames.iter().all(|r| r.len() == width && r.iter().all(|v| v.is_finite())));
            }
        }
    }
}
