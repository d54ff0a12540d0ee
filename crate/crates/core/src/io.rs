//! Image, trajectory and recorded-dataset formats.
//!
//! Dataset directory layout:
//!
//! ```text
//! camera.toml          [camera] fx, fy, cx, cy, width, height
//! trajectory.txt       one camera pose per frame: timestamp tx ty tz qx qy qz qw
//! depth/NNNNNN.pfm     range along the pixel ray in meters, 0 = no measurement
//! labels/NNNNNN.pgm    16-bit segment labels, 0 = background
//! masks/NNNNNN.pgm     optional 16-bit detector instance masks, 0 = none
//! ```
//!
//! Frame `k` pairs the `k`-th trajectory line with files numbered `k`.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{PinholeCamera, RigidTransform, Vec3};
use crate::image::{DepthImage, Image};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{0}")]
    Malformed(String),
}

fn malformed(msg: impl Into<String>) -> FormatError {
    FormatError::Malformed(msg.into())
}

/// Reads whitespace-separated header tokens, skipping `#` comments; consumes the
/// single whitespace byte after the last token.
fn header_tokens<R: BufRead>(input: &mut R, count: usize) -> Result<Vec<String>, FormatError> {
    let mut tokens = Vec::new();
    let mut current = Vec::new();
    let mut byte = [0u8; 1];
    while tokens.len() < count {
        if input.read(&mut byte)? == 0 {
            return Err(malformed("unexpected end of header"));
        }
        match byte[0] {
            b'#' if current.is_empty() => {
                let mut skip = Vec::new();
                input.read_until(b'\n', &mut skip)?;
            }
            c if c.is_ascii_whitespace() => {
                if !current.is_empty() {
                    tokens.push(String::from_utf8_lossy(&current).into_owned());
                    current.clear();
                }
            }
            c => current.push(c),
        }
    }
    Ok(tokens)
}

fn parse<T: std::str::FromStr>(token: &str, what: &str) -> Result<T, FormatError> {
    token.parse().map_err(|_| malformed(format!("invalid {what} '{token}'")))
}

/// Single-channel PFM, little-endian (negative scale), rows stored bottom to top.
pub fn write_pfm<W: Write>(out: &mut W, image: &DepthImage) -> io::Result<()> {
    write!(out, "Pf\n{} {}\n-1.0\n", image.width(), image.height())?;
    for row in image.rows().rev() {
        for v in row {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_pfm<R: Read>(input: R) -> Result<DepthImage, FormatError> {
    let mut input = BufReader::new(input);
    let tokens = header_tokens(&mut input, 4)?;
    if tokens[0] != "Pf" {
        return Err(malformed(format!("expected a grayscale PFM ('Pf'), found '{}'", tokens[0])));
    }
    let width: u32 = parse(&tokens[1], "width")?;
    let height: u32 = parse(&tokens[2], "height")?;
    let scale: f64 = parse(&tokens[3], "scale")?;
    let little = scale < 0.0;
    let n = width as usize * height as usize;
    let mut raw = vec![0u8; n * 4];
    input
        .read_exact(&mut raw)
        .map_err(|_| malformed(format!("PFM data shorter than {width}x{height}")))?;
    let mut data = vec![0f32; n];
    for (row_from_bottom, chunk) in raw.chunks_exact(width as usize * 4).enumerate() {
        let row = height as usize - 1 - row_from_bottom;
        for (u, b) in chunk.chunks_exact(4).enumerate() {
            let bytes = [b[0], b[1], b[2], b[3]];
            data[row * width as usize + u] = if little {
                f32::from_le_bytes(bytes)
            } else {
                f32::from_be_bytes(bytes)
            };
        }
    }
    Image::from_vec(width, height, data).ok_or_else(|| malformed("PFM size mismatch"))
}

/// Binary 16-bit PGM (`P5`, maxval 65535, big-endian samples).
pub fn write_pgm16<W: Write>(out: &mut W, image: &Image<u16>) -> io::Result<()> {
    write!(out, "P5\n{} {}\n65535\n", image.width(), image.height())?;
    for v in image.data() {
        out.write_all(&v.to_be_bytes())?;
    }
    Ok(())
}

/// Reads binary PGM with 8- or 16-bit samples.
pub fn read_pgm<R: Read>(input: R) -> Result<Image<u16>, FormatError> {
    let mut input = BufReader::new(input);
    let tokens = header_tokens(&mut input, 4)?;
    if tokens[0] != "P5" {
        return Err(malformed(format!("expected a binary PGM ('P5'), found '{}'", tokens[0])));
    }
    let width: u32 = parse(&tokens[1], "width")?;
    let height: u32 = parse(&tokens[2], "height")?;
    let maxval: u32 = parse(&tokens[3], "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(malformed(format!("PGM maxval {maxval} out of range")));
    }
    let n = width as usize * height as usize;
    let wide = maxval > 255;
    let mut raw = vec![0u8; if wide { 2 * n } else { n }];
    input
        .read_exact(&mut raw)
        .map_err(|_| malformed(format!("PGM data shorter than {width}x{height}")))?;
    let data = if wide {
        raw.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    } else {
        raw.into_iter().map(u16::from).collect()
    };
    Image::from_vec(width, height, data).ok_or_else(|| malformed("PGM size mismatch"))
}

/// Rotation from stored quaternion components, used verbatim when already unit length.
pub fn quaternion_from_components(x: f64, y: f64, z: f64, w: f64) -> UnitQuaternion<f64> {
    let q = Quaternion::new(w, x, y, z);
    if (q.norm() - 1.0).abs() < 1e-12 {
        UnitQuaternion::new_unchecked(q)
    } else {
        UnitQuaternion::new_normalize(q)
    }
}

/// Rebuilds `pose` from its quaternion: the pose a trajectory file written from
/// `pose` reads back as, bit for bit.
pub fn canonical_pose(pose: &RigidTransform) -> RigidTransform {
    RigidTransform::from_quaternion(pose.quaternion(), *pose.translation())
}

/// Writes `timestamp tx ty tz qx qy qz qw` lines with round-trip precision.
pub fn write_trajectory<W: Write>(out: &mut W, poses: &[(f64, RigidTransform)]) -> io::Result<()> {
    writeln!(out, "# timestamp tx ty tz qx qy qz qw")?;
    for (stamp, pose) in poses {
        let t = pose.translation();
        let q = pose.quaternion();
        writeln!(out, "{} {} {} {} {} {} {} {}", stamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w)?;
    }
    Ok(())
}

pub fn read_trajectory<R: Read>(input: R) -> Result<Vec<(f64, RigidTransform)>, FormatError> {
    let mut poses = Vec::new();
    for (lineno, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| parse(t, "number"))
            .collect::<Result<_, _>>()
            .map_err(|e| malformed(format!("trajectory line {}: {e}", lineno + 1)))?;
        if values.len() != 8 {
            return Err(malformed(format!(
                "trajectory line {}: expected 8 values, found {}",
                lineno + 1,
                values.len()
            )));
        }
        let q = quaternion_from_components(values[4], values[5], values[6], values[7]);
        poses.push((values[0], RigidTransform::from_quaternion(q, Vec3::new(values[1], values[2], values[3]))));
    }
    Ok(poses)
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraFile {
    camera: PinholeCamera,
}

pub fn write_camera_toml<W: Write>(out: &mut W, cam: &PinholeCamera) -> io::Result<()> {
    let text = toml::to_string(&CameraFile { camera: *cam }).map_err(io::Error::other)?;
    out.write_all(text.as_bytes())
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no frames found in {0}")]
    NoFrames(PathBuf),
    #[error("frame {index} is missing ({path})")]
    MissingFrame { index: usize, path: PathBuf },
    #[error("frame {index}: cannot decode {path}: {message}")]
    Decode { index: usize, path: PathBuf, message: String },
    #[error("trajectory has {poses} poses but {frames} depth frames were found")]
    CountMismatch { frames: usize, poses: usize },
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
}

/// One frame of input to the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: u32,
    pub camera_pose: RigidTransform,
    pub depth: DepthImage,
    pub labels: Image<u16>,
    pub masks: Image<u16>,
}

/// Recorded RGB-D sequence on disk; frames are decoded on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    camera: PinholeCamera,
    poses: Vec<RigidTransform>,
    mask_pattern: Option<String>,
}

fn frame_file(dir: &Path, index: usize, ext: &str) -> PathBuf {
    dir.join(format!("{index:06}.{ext}"))
}

/// Expands `%d` / `%0Nd` in `pattern` with `index`.
pub fn expand_pattern(pattern: &str, index: usize) -> String {
    if let Some(start) = pattern.find('%') {
        if let Some(len) = pattern[start..].find('d') {
            let spec = &pattern[start + 1..start + len];
            if spec.chars().all(|c| c.is_ascii_digit()) {
                let width: usize = spec.trim_start_matches('0').parse().unwrap_or(0);
                return format!("{}{index:0width$}{}", &pattern[..start], &pattern[start + len + 1..]);
            }
        }
    }
    pattern.to_string()
}

impl Dataset {
    /// Opens `root`; `mask_pattern` overrides `masks/NNNNNN.pgm` (relative paths
    /// resolve against `root`).
    pub fn open(root: &Path, mask_pattern: Option<String>) -> Result<Self, DatasetError> {
        let cam_path = root.join("camera.toml");
        let depth_dir = root.join("depth");
        let depth_count = fs::read_dir(&depth_dir)
            .map(|entries| {
                entries
                    .filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "pfm"))
                    .count()
            })
            .unwrap_or(0);
        if depth_count == 0 {
            return Err(DatasetError::NoFrames(root.to_path_buf()));
        }
        let config_err = |path: &Path, message: String| DatasetError::Config {
            path: path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(&cam_path).map_err(|e| config_err(&cam_path, e.to_string()))?;
        let camera: CameraFile = toml::from_str(&text).map_err(|e| config_err(&cam_path, e.to_string()))?;
        camera.camera.validate().map_err(|e| config_err(&cam_path, e.to_string()))?;
        let traj_path = root.join("trajectory.txt");
        let file = fs::File::open(&traj_path).map_err(|e| config_err(&traj_path, e.to_string()))?;
        let mut stamped = read_trajectory(file).map_err(|e| config_err(&traj_path, e.to_string()))?;
        stamped.sort_by(|a, b| a.0.total_cmp(&b.0));
        let poses: Vec<RigidTransform> = stamped.into_iter().map(|(_, p)| p).collect();
        if poses.is_empty() {
            return Err(DatasetError::NoFrames(root.to_path_buf()));
        }
        for index in 0..poses.len() {
            for (dir, ext) in [("depth", "pfm"), ("labels", "pgm")] {
                let path = frame_file(&root.join(dir), index, ext);
                if !path.is_file() {
                    return Err(DatasetError::MissingFrame { index, path });
                }
            }
        }
        if depth_count != poses.len() {
            return Err(DatasetError::CountMismatch {
                frames: depth_count,
                poses: poses.len(),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            camera: camera.camera,
            poses,
            mask_pattern,
        })
    }

    pub fn camera(&self) -> &PinholeCamera {
        &self.camera
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    fn mask_path(&self, index: usize) -> PathBuf {
        match &self.mask_pattern {
            Some(p) => self.root.join(expand_pattern(p, index)),
            None => frame_file(&self.root.join("masks"), index, "pgm"),
        }
    }

    pub fn frame(&self, index: usize) -> Result<Frame, DatasetError> {
        let decode = |path: PathBuf, e: FormatError| DatasetError::Decode {
            index,
            path,
            message: e.to_string(),
        };
        let open = |path: &Path| {
            fs::File::open(path).map_err(|_| DatasetError::MissingFrame {
                index,
                path: path.to_path_buf(),
            })
        };
        let depth_path = frame_file(&self.root.join("depth"), index, "pfm");
        let depth = read_pfm(open(&depth_path)?).map_err(|e| decode(depth_path.clone(), e))?;
        let label_path = frame_file(&self.root.join("labels"), index, "pgm");
        let labels = read_pgm(open(&label_path)?).map_err(|e| decode(label_path.clone(), e))?;
        let mask_path = self.mask_path(index);
        let masks = if mask_path.is_file() {
            read_pgm(open(&mask_path)?).map_err(|e| decode(mask_path.clone(), e))?
        } else {
            Image::filled(self.camera.width, self.camera.height, 0)
        };
        let dims = (self.camera.width, self.camera.height);
        for (path, got) in [
            (&depth_path, depth.dimensions()),
            (&label_path, labels.dimensions()),
            (&mask_path, masks.dimensions()),
        ] {
            if got != dims {
                return Err(DatasetError::Decode {
                    index,
                    path: path.clone(),
                    message: format!("image is {}x{}, camera expects {}x{}", got.0, got.1, dims.0, dims.1),
                });
            }
        }
        Ok(Frame {
            index: index as u32,
            camera_pose: self.poses[index],
            depth,
            labels,
            masks,
        })
    }
}

/// Writes frames in the dataset layout. The trajectory file is written from
/// `source_poses` (one per frame); a frame whose `camera_pose` equals
/// [`canonical_pose`] of its source pose is reproduced exactly on ingestion.
pub fn export_frames(
    root: &Path,
    cam: &PinholeCamera,
    frames: &[Frame],
    source_poses: &[RigidTransform],
) -> io::Result<()> {
    if frames.len() != source_poses.len() {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "one source pose per frame is required"));
    }
    for dir in ["depth", "labels", "masks"] {
        fs::create_dir_all(root.join(dir))?;
    }
    write_camera_toml(&mut fs::File::create(root.join("camera.toml"))?, cam)?;
    let mut poses = Vec::new();
    for (f, source) in frames.iter().zip(source_poses) {
        let i = f.index as usize;
        write_pfm(&mut io::BufWriter::new(fs::File::create(frame_file(&root.join("depth"), i, "pfm"))?), &f.depth)?;
        write_pgm16(&mut io::BufWriter::new(fs::File::create(frame_file(&root.join("labels"), i, "pgm"))?), &f.labels)?;
        write_pgm16(&mut io::BufWriter::new(fs::File::create(frame_file(&root.join("masks"), i, "pgm"))?), &f.masks)?;
        poses.push((f.index as f64, *source));
    }
    write_trajectory(&mut io::BufWriter::new(fs::File::create(root.join("trajectory.txt"))?), &poses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_roundtrip_and_orientation() {
        let img = Image::from_vec(3, 2, vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        let mut buf = Vec::new();
        write_pfm(&mut buf, &img).unwrap();
        let header = b"Pf\n3 2\n-1.0\n";
        assert_eq!(&buf[..header.len()], header);
        // bottom row first
        assert_eq!(&buf[header.len()..header.len() + 4], &4.0f32.to_le_bytes());
        assert_eq!(read_pfm(buf.as_slice()).unwrap(), img);
    }

    #[test]
    fn pgm_roundtrip_and_8bit() {
        let img = Image::from_vec(2, 2, vec![0u16, 1, 300, 65535]).unwrap();
        let mut buf = Vec::new();
        write_pgm16(&mut buf, &img).unwrap();
        assert_eq!(read_pgm(buf.as_slice()).unwrap(), img);
        let small = b"P5\n# comment\n2 1\n255\n\x07\x09";
        assert_eq!(read_pgm(&small[..]).unwrap().data(), &[7, 9]);
        assert!(read_pgm(&b"P2\n1 1\n255\n1"[..]).is_err());
    }

    #[test]
    fn trajectory_roundtrip_reproduces_canonical_pose() {
        for k in 0..50 {
            let a = k as f64 * 0.37;
            let raw = RigidTransform::look_at(Vec3::new(a.cos(), a.sin(), 0.4 + 0.01 * k as f64), Vec3::zeros(), Vec3::z());
            let mut buf = Vec::new();
            write_trajectory(&mut buf, &[(0.0, raw), (1.0, RigidTransform::identity())]).unwrap();
            let back = read_trajectory(buf.as_slice()).unwrap();
            assert_eq!(back.len(), 2);
            assert_eq!(back[0].1, canonical_pose(&raw));
        }
        assert!(read_trajectory(&b"0 1 2 3\n"[..]).is_err());
    }

    #[test]
    fn pattern_expansion() {
        assert_eq!(expand_pattern("m/%06d.pgm", 7), "m/000007.pgm");
        assert_eq!(expand_pattern("m/%d.pgm", 12), "m/12.pgm");
        assert_eq!(expand_pattern("fixed.pgm", 3), "fixed.pgm");
    }
}
