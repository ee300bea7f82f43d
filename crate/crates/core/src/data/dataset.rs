use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::scene::SyntheticScene;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::render::{Camera, SceneBounds};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub n_train_cams: usize,
    pub n_test_cams: usize,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    /// Camera sphere radius in meters.
    pub radius: f64,
    /// Focal length in units of the image width.
    pub focal_scale: f64,
    pub n_blobs: usize,
    pub oracle_samples: usize,
    /// Shift applied to every frame time, wrapping at 1.
    pub time_offset: f64,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train_cams: 12,
            n_test_cams: 3,
            n_frames: 16,
            width: 64,
            height: 64,
            radius: 1.0,
            focal_scale: 1.1,
            n_blobs: 3,
            oracle_samples: 512,
            time_offset: 0.0,
            background: [0.1; 3],
            seed: 1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_train_cams", self.n_train_cams),
            ("n_test_cams", self.n_test_cams),
            ("n_frames", self.n_frames),
            ("width", self.width),
            ("height", self.height),
            ("n_blobs", self.n_blobs),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.oracle_samples < 64 {
            return Err(Error::Config(format!("oracle_samples must be at least 64, got {}", self.oracle_samples)));
        }
        if !(self.radius > 0.25 * 3f64.sqrt()) || !self.radius.is_finite() {
            return Err(Error::Config(format!("radius {} puts cameras inside the scene bounds", self.radius)));
        }
        if !(self.focal_scale > 0.0) || !self.focal_scale.is_finite() {
            return Err(Error::Config(format!("focal_scale must be positive, got {}", self.focal_scale)));
        }
        if !(0.0..1.0).contains(&self.time_offset) {
            return Err(Error::Config(format!("time_offset must lie in [0, 1), got {}", self.time_offset)));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("background channels must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn n_cameras(&self) -> usize {
        self.n_train_cams + self.n_test_cams
    }

    /// Scene time of frame `f`.
    pub fn time(&self, f: usize) -> f64 {
        (f as f64 / self.n_frames as f64 + self.time_offset).fract()
    }

    pub fn scene(&self) -> SyntheticScene {
        SyntheticScene::random(self.n_blobs, self.seed, self.background)
    }
}

/// Fibonacci-sphere cameras looking at the origin, with the test cameras
/// spread evenly through the index order. Returns `(cameras, train, test)`.
pub fn place_cameras(config: &DatasetConfig) -> Result<(Vec<Camera>, Vec<usize>, Vec<usize>)> {
    config.validate()?;
    let n = config.n_cameras();
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let focal = config.focal_scale * config.width as f64;
    let cams = (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let theta = golden * i as f64;
            let dir = [r * theta.cos(), r * theta.sin(), z];
            let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
            let center = dir.map(|v| config.radius * v / norm);
            let up = if z.abs() > 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
            Camera::look_at(center, [0.0; 3], up, focal, config.width, config.height)
        })
        .collect::<Result<Vec<_>>>()?;
    let test: Vec<usize> = (0..config.n_test_cams)
        .map(|j| ((j as f64 + 0.5) * n as f64 / config.n_test_cams as f64) as usize)
        .collect();
    let train = (0..n).filter(|i| !test.contains(i)).collect();
    Ok((cams, train, test))
}

/// For each of +x, +y, +z the training camera whose center direction is
/// closest to that axis. Picks are distinct when there are enough cameras.
pub fn conditioning_cameras(cameras: &[Camera], train: &[usize]) -> [usize; 3] {
    let mut picked: Vec<usize> = Vec::with_capacity(3);
    for axis in 0..3 {
        let score = |&&i: &&usize| {
            let c = cameras[i].center();
            let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            c[axis] / n
        };
        let pool: Vec<&usize> = train.iter().filter(|i| !picked.contains(i)).collect();
        let pool = if pool.is_empty() { train.iter().collect() } else { pool };
        let best = pool
            .into_iter()
            .max_by(|a, b| score(a).total_cmp(&score(b)).then(b.cmp(a)))
            .copied()
            .unwrap_or(0);
        picked.push(best);
    }
    [picked[0], picked[1], picked[2]]
}

/// Blob centers at time `t` projected into `cam`, normalized so the image
/// spans `[-1, 1]` on both axes.
pub fn project_keypoints(scene: &SyntheticScene, cam: &Camera, t: f64) -> Result<Vec<[f64; 2]>> {
    scene
        .blobs
        .iter()
        .map(|b| {
            let c = b.center_at(t);
            let (x, y) = cam
                .project(c)
                .ok_or_else(|| Error::invalid("project_keypoints", format!("blob center {c:?} is behind the camera")))?;
            Ok([2.0 * x / cam.width as f64 - 1.0, 2.0 * y / cam.height as f64 - 1.0])
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub camera_id: usize,
    /// Image path relative to the dataset root.
    pub image_path: PathBuf,
    pub keypoints: Vec<[f64; 2]>,
}

/// A multi-view video: cameras, images indexed `[frame][camera]` and
/// per-frame keypoints seen from `keypoint_camera`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub bounds: SceneBounds,
    pub cameras: Vec<Camera>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub conditioning: [usize; 3],
    pub keypoint_camera: usize,
    pub images: Vec<Vec<Image>>,
    pub keypoints: Vec<Vec<[f64; 2]>>,
}

fn image_rel_path(cam: usize, frame: usize) -> PathBuf {
    PathBuf::from("frames").join(cam.to_string()).join(format!("{frame}.ppm"))
}

fn keypoint_rel_path(frame: usize) -> PathBuf {
    PathBuf::from("keypoints").join(format!("{frame}.txt"))
}

fn join_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl Dataset {
    /// Render every (frame, camera) pair with the oracle. Images are stored
    /// as they will be read back from 8-bit files.
    pub fn synthesize(scene: &SyntheticScene, config: &DatasetConfig) -> Result<Dataset> {
        let (cameras, train, test) = place_cameras(config)?;
        let conditioning = conditioning_cameras(&cameras, &train);
        let keypoint_camera = conditioning[0];
        let pairs: Vec<(usize, usize)> = (0..config.n_frames)
            .flat_map(|f| (0..cameras.len()).map(move |c| (f, c)))
            .collect();
        let rendered: Vec<Image> = pairs
            .par_iter()
            .map(|&(f, c)| {
                scene
                    .oracle_render(&cameras[c], config.time(f), config.oracle_samples)
                    .map(|img| img.quantized())
            })
            .collect::<Result<_>>()?;
        let mut images = vec![Vec::with_capacity(cameras.len()); config.n_frames];
        for ((f, _), img) in pairs.into_iter().zip(rendered) {
            images[f].push(img);
        }
        let keypoints = (0..config.n_frames)
            .map(|f| project_keypoints(scene, &cameras[keypoint_camera], config.time(f)))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            config: config.clone(),
            bounds: scene.bounds,
            cameras,
            train,
            test,
            conditioning,
            keypoint_camera,
            images,
            keypoints,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.images.len()
    }

    pub fn image(&self, frame: usize, cam: usize) -> &Image {
        &self.images[frame][cam]
    }

    pub fn background(&self) -> [f64; 3] {
        self.config.background
    }

    pub fn records(&self) -> Vec<FrameRecord> {
        let mut out = Vec::new();
        for f in 0..self.n_frames() {
            for c in 0..self.cameras.len() {
                out.push(FrameRecord {
                    frame_index: f,
                    camera_id: c,
                    image_path: image_rel_path(c, f),
                    keypoints: self.keypoints[f].clone(),
                });
            }
        }
        out
    }

    /// Keep only the first `n` frames.
    pub fn truncated(&self, n: usize) -> Result<Dataset> {
        if n == 0 || n > self.n_frames() {
            return Err(Error::invalid("truncated", format!("{n} frames requested of {}", self.n_frames())));
        }
        let mut out = self.clone();
        out.images.truncate(n);
        out.keypoints.truncate(n);
        out.config.n_frames = n;
        Ok(out)
    }

    fn manifest(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "n_train_cams={}", c.n_train_cams);
        let _ = writeln!(s, "n_test_cams={}", c.n_test_cams);
        let _ = writeln!(s, "n_frames={}", c.n_frames);
        let _ = writeln!(s, "width={}", c.width);
        let _ = writeln!(s, "height={}", c.height);
        let _ = writeln!(s, "radius={}", c.radius);
        let _ = writeln!(s, "focal_scale={}", c.focal_scale);
        let _ = writeln!(s, "n_blobs={}", c.n_blobs);
        let _ = writeln!(s, "oracle_samples={}", c.oracle_samples);
        let _ = writeln!(s, "time_offset={}", c.time_offset);
        let _ = writeln!(s, "background={}", join_list(&c.background));
        let _ = writeln!(s, "seed={}", c.seed);
        let _ = writeln!(s, "bounds_center={}", join_list(&self.bounds.center));
        let _ = writeln!(s, "bounds_half_extent={}", self.bounds.half_extent);
        let _ = writeln!(s, "train_cameras={}", join_list(&self.train));
        let _ = writeln!(s, "test_cameras={}", join_list(&self.test));
        let _ = writeln!(s, "conditioning_cameras={}", join_list(&self.conditioning));
        let _ = writeln!(s, "keypoint_camera={}", self.keypoint_camera);
        s
    }

    fn cameras_text(&self) -> String {
        let mut s = String::new();
        for (id, cam) in self.cameras.iter().enumerate() {
            let _ = write!(s, "{id}");
            for v in cam.intrinsics.iter().flatten().chain(cam.pose.iter().flatten()) {
                let _ = write!(s, " {v}");
            }
            let _ = writeln!(s, " {} {}", cam.width, cam.height);
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("keypoints")).map_err(|e| Error::io(dir, e))?;
        for c in 0..self.cameras.len() {
            let d = dir.join("frames").join(c.to_string());
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        write_file(&dir.join("manifest.txt"), self.manifest().as_bytes())?;
        write_file(&dir.join("cameras.txt"), self.cameras_text().as_bytes())?;
        for (f, kps) in self.keypoints.iter().enumerate() {
            let text: String = kps.iter().map(|[x, y]| format!("{x} {y}\n")).collect();
            write_file(&dir.join(keypoint_rel_path(f)), text.as_bytes())?;
        }
        let pairs: Vec<(usize, usize)> = (0..self.n_frames())
            .flat_map(|f| (0..self.cameras.len()).map(move |c| (f, c)))
            .collect();
        pairs
            .par_iter()
            .try_for_each(|&(f, c)| self.images[f][c].write_ppm(&dir.join(image_rel_path(c, f))))
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join("manifest.txt");
        let mut m = Manifest::parse(&manifest_path)?;
        let config = DatasetConfig {
            n_train_cams: m.take("n_train_cams")?,
            n_test_cams: m.take("n_test_cams")?,
            n_frames: m.take("n_frames")?,
            width: m.take("width")?,
            height: m.take("height")?,
            radius: m.take("radius")?,
            focal_scale: m.take("focal_scale")?,
            n_blobs: m.take("n_blobs")?,
            oracle_samples: m.take("oracle_samples")?,
            time_offset: m.take("time_offset")?,
            background: m.take_array("background")?,
            seed: m.take("seed")?,
        };
        config
            .validate()
            .map_err(|e| Error::malformed(&manifest_path, e.to_string()))?;
        let bounds = SceneBounds {
            center: m.take_array("bounds_center")?,
            half_extent: m.take("bounds_half_extent")?,
        };
        let train: Vec<usize> = m.take_list("train_cameras")?;
        let test: Vec<usize> = m.take_list("test_cameras")?;
        let conditioning: [usize; 3] = m.take_array("conditioning_cameras")?;
        let keypoint_camera: usize = m.take("keypoint_camera")?;
        m.finish()?;

        let n = config.n_cameras();
        let bad = |detail: String| Error::malformed(&manifest_path, detail);
        if train.len() != config.n_train_cams || test.len() != config.n_test_cams {
            return Err(bad("camera split sizes disagree with n_train_cams/n_test_cams".into()));
        }
        let mut seen = vec![false; n];
        for &i in train.iter().chain(&test) {
            if i >= n || seen[i] {
                return Err(bad(format!("camera {i} is out of range or listed twice in the split")));
            }
            seen[i] = true;
        }
        if conditioning.iter().any(|i| !train.contains(i)) || !train.contains(&keypoint_camera) {
            return Err(bad("conditioning and keypoint cameras must be training cameras".into()));
        }
        if !(bounds.half_extent > 0.0) || bounds.center.iter().any(|v| !v.is_finite()) {
            return Err(bad("bounds must be finite with positive half extent".into()));
        }

        let cameras = parse_cameras(&dir.join("cameras.txt"), n, &config)?;
        let images = (0..config.n_frames)
            .map(|f| {
                (0..n)
                    .map(|c| {
                        let path = dir.join(image_rel_path(c, f));
                        let img = Image::read_ppm(&path)?;
                        if (img.width, img.height) != (config.width, config.height) {
                            return Err(Error::malformed(
                                &path,
                                format!("size {}x{} differs from {}x{}", img.width, img.height, config.width, config.height),
                            ));
                        }
                        Ok(img)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let keypoints = (0..config.n_frames)
            .map(|f| parse_keypoints(&dir.join(keypoint_rel_path(f)), config.n_blobs))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            config,
            bounds,
            cameras,
            train,
            test,
            conditioning,
            keypoint_camera,
            images,
            keypoints,
        })
    }
}

/// Synthesize and write a dataset in one go.
pub fn generate_dataset(scene: &SyntheticScene, config: &DatasetConfig, out_dir: &Path) -> Result<Dataset> {
    let ds = Dataset::synthesize(scene, config)?;
    ds.write(out_dir)?;
    Ok(ds)
}

struct Manifest {
    path: PathBuf,
    entries: BTreeMap<String, String>,
}

impl Manifest {
    fn parse(path: &Path) -> Result<Manifest> {
        let text = read_text(path)?;
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::malformed(path, format!("line {}: expected key=value", i + 1)))?;
            if entries.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::malformed(path, format!("duplicate key `{}`", k.trim())));
            }
        }
        Ok(Manifest {
            path: path.to_path_buf(),
            entries,
        })
    }

    fn raw(&mut self, key: &str) -> Result<String> {
        self.entries
            .remove(key)
            .ok_or_else(|| Error::malformed(&self.path, format!("missing field `{key}`")))
    }

    fn take<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| Error::malformed(&self.path, format!("field `{key}`: cannot parse `{v}`")))
    }

    fn take_list<T: std::str::FromStr>(&mut self, key: &str) -> Result<Vec<T>> {
        let v = self.raw(key)?;
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::malformed(&self.path, format!("field `{key}`: cannot parse `{s}`")))
            })
            .collect()
    }

    fn take_array<T: std::str::FromStr + std::fmt::Debug, const N: usize>(&mut self, key: &str) -> Result<[T; N]> {
        let v = self.take_list(key)?;
        let len = v.len();
        v.try_into()
            .map_err(|_| Error::malformed(&self.path, format!("field `{key}`: expected {N} values, got {len}")))
    }

    fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            Some(k) => Err(Error::malformed(&self.path, format!("unknown field `{k}`"))),
            None => Ok(()),
        }
    }
}

fn parse_cameras(path: &Path, n: usize, config: &DatasetConfig) -> Result<Vec<Camera>> {
    let text = read_text(path)?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != n {
        return Err(Error::malformed(path, format!("expected {n} cameras, found {}", lines.len())));
    }
    lines
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() != 24 {
                return Err(Error::malformed(path, format!("camera line {}: expected 24 fields, got {}", i + 1, tok.len())));
            }
            let field = |j: usize, name: &str| -> Result<f64> {
                tok[j]
                    .parse::<f64>()
                    .map_err(|_| Error::malformed(path, format!("camera {i}: field {name} = `{}`", tok[j])))
            };
            let id: usize = tok[0]
                .parse()
                .map_err(|_| Error::malformed(path, format!("camera line {}: bad id `{}`", i + 1, tok[0])))?;
            if id != i {
                return Err(Error::malformed(path, format!("camera line {}: id {id} out of order", i + 1)));
            }
            let mut intrinsics = [[0.0; 3]; 3];
            for (j, v) in intrinsics.iter_mut().flatten().enumerate() {
                *v = field(1 + j, &format!("K[{}][{}]", j / 3, j % 3))?;
            }
            let mut pose = [[0.0; 4]; 3];
            for (j, v) in pose.iter_mut().flatten().enumerate() {
                *v = field(10 + j, &format!("pose[{}][{}]", j / 4, j % 4))?;
            }
            let w: usize = tok[22]
                .parse()
                .map_err(|_| Error::malformed(path, format!("camera {i}: field width = `{}`", tok[22])))?;
            let h: usize = tok[23]
                .parse()
                .map_err(|_| Error::malformed(path, format!("camera {i}: field height = `{}`", tok[23])))?;
            if (w, h) != (config.width, config.height) {
                return Err(Error::malformed(path, format!("camera {i}: size {w}x{h} disagrees with manifest")));
            }
            Camera::new(intrinsics, pose, w, h).map_err(|e| Error::malformed(path, format!("camera {i}: {e}")))
        })
        .collect()
}

fn parse_keypoints(path: &Path, expected: usize) -> Result<Vec<[f64; 2]>> {
    let pts = read_keypoints(path)?;
    if pts.len() != expected {
        return Err(Error::malformed(path, format!("expected {expected} keypoints, found {}", pts.len())));
    }
    Ok(pts)
}

/// A keypoint file: one `x y` pair per line.
pub fn read_keypoints(path: &Path) -> Result<Vec<[f64; 2]>> {
    let text = read_text(path)?;
    let pts = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::malformed(path, format!("line {}: expected two numbers", i + 1)))?;
            match v[..] {
                [x, y] if x.is_finite() && y.is_finite() => Ok([x, y]),
                _ => Err(Error::malformed(path, format!("line {}: expected two finite numbers", i + 1))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if pts.is_empty() {
        return Err(Error::malformed(path, "no keypoints"));
    }
    Ok(pts)
}
