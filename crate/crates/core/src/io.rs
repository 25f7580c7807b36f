//! Point-cloud, label, panoptic and box files.
//!
//! ```text
//! PCB1  "VOXMTPC1", u32 N, N x (x, y, z, intensity, dt) as f32
//! LBL1  "VOXMTLB1", u32 N, N x u32 semantic, N x u32 instance
//! PAN1  "VOXMTPN1", same layout as LBL1
//! BOX1  text, one line per box: cx,cy,cz,l,w,h,yaw,class,score
//! ```
//!
//! Integers and floats are little-endian. The box `class` column is the
//! thing-class index.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::heads::Box3D;
use crate::refine::PanopticLabel;
use crate::voxelizer::{Point, PointCloud};

pub const POINTS_MAGIC: &[u8; 8] = b"VOXMTPC1";
pub const LABELS_MAGIC: &[u8; 8] = b"VOXMTLB1";
pub const PANOPTIC_MAGIC: &[u8; 8] = b"VOXMTPN1";

fn read_magic<R: Read>(r: &mut R, expected: &[u8; 8], what: &str) -> Result<()> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::input(format!("{what}: file too short for header")))?;
    if &magic != expected {
        return Err(Error::input(format!("{what}: bad magic")));
    }
    Ok(())
}

fn truncated(what: &str) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::input(format!("{what}: truncated payload"))
        } else {
            Error::Io(e)
        }
    }
}

fn ensure_eof<R: Read>(r: &mut R, what: &str) -> Result<()> {
    let mut b = [0u8; 1];
    if r.read(&mut b)? != 0 {
        return Err(Error::input(format!("{what}: trailing bytes after payload")));
    }
    Ok(())
}

pub fn write_points<W: Write>(mut w: W, cloud: &PointCloud) -> Result<()> {
    w.write_all(POINTS_MAGIC)?;
    w.write_u32::<LittleEndian>(cloud.len() as u32)?;
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity, p.dt] {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(())
}

pub fn read_points<R: Read>(mut r: R) -> Result<PointCloud> {
    read_magic(&mut r, POINTS_MAGIC, "point cloud")?;
    let n = r.read_u32::<LittleEndian>().map_err(truncated("point cloud"))? as usize;
    let mut raw = vec![0f32; n * 5];
    r.read_f32_into::<LittleEndian>(&mut raw).map_err(truncated("point cloud"))?;
    ensure_eof(&mut r, "point cloud")?;
    let points = raw
        .chunks_exact(5)
        .map(|c| Point::new(c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64, c[4] as f64))
        .collect();
    let cloud = PointCloud::new(points);
    cloud.validate()?;
    Ok(cloud)
}

fn write_label_pair<W: Write>(mut w: W, magic: &[u8; 8], l: &PanopticLabel) -> Result<()> {
    l.validate()?;
    w.write_all(magic)?;
    w.write_u32::<LittleEndian>(l.len() as u32)?;
    for &v in l.semantic.iter().chain(&l.instance) {
        w.write_u32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_label_pair<R: Read>(mut r: R, magic: &[u8; 8], what: &str) -> Result<PanopticLabel> {
    read_magic(&mut r, magic, what)?;
    let n = r.read_u32::<LittleEndian>().map_err(truncated(what))? as usize;
    let mut semantic = vec![0u32; n];
    let mut instance = vec![0u32; n];
    r.read_u32_into::<LittleEndian>(&mut semantic).map_err(truncated(what))?;
    r.read_u32_into::<LittleEndian>(&mut instance).map_err(truncated(what))?;
    ensure_eof(&mut r, what)?;
    Ok(PanopticLabel { semantic, instance })
}

pub fn write_labels<W: Write>(w: W, l: &PanopticLabel) -> Result<()> {
    write_label_pair(w, LABELS_MAGIC, l)
}

pub fn read_labels<R: Read>(r: R) -> Result<PanopticLabel> {
    read_label_pair(r, LABELS_MAGIC, "label file")
}

pub fn write_panoptic<W: Write>(w: W, l: &PanopticLabel) -> Result<()> {
    write_label_pair(w, PANOPTIC_MAGIC, l)
}

pub fn read_panoptic<R: Read>(r: R) -> Result<PanopticLabel> {
    read_label_pair(r, PANOPTIC_MAGIC, "panoptic file")
}

pub fn write_boxes<W: Write>(mut w: W, boxes: &[Box3D]) -> Result<()> {
    for b in boxes {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            b.center[0], b.center[1], b.center[2], b.dims[0], b.dims[1], b.dims[2], b.yaw, b.class_id, b.score
        )?;
    }
    Ok(())
}

pub fn read_boxes<R: BufRead>(r: R) -> Result<Vec<Box3D>> {
    let mut out = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 9 {
            return Err(Error::input(format!("box line {}: expected 9 fields, found {}", ln + 1, f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| Error::input(format!("box line {}: bad number `{}`", ln + 1, f[i])))
        };
        let class_id = f[7]
            .parse()
            .map_err(|_| Error::input(format!("box line {}: bad class `{}`", ln + 1, f[7])))?;
        let b = Box3D {
            center: [num(0)?, num(1)?, num(2)?],
            dims: [num(3)?, num(4)?, num(5)?],
            yaw: num(6)?,
            class_id,
            score: num(8)?,
        };
        b.validate().map_err(|e| Error::input(format!("box line {}: {e}", ln + 1)))?;
        out.push(b);
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

pub fn save_points(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_points(&mut w, cloud)?;
    Ok(w.flush()?)
}

pub fn load_points(path: impl AsRef<Path>) -> Result<PointCloud> {
    read_points(open(path.as_ref())?)
}

pub fn save_labels(path: impl AsRef<Path>, l: &PanopticLabel) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_labels(&mut w, l)?;
    Ok(w.flush()?)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<PanopticLabel> {
    read_labels(open(path.as_ref())?)
}

pub fn save_panoptic(path: impl AsRef<Path>, l: &PanopticLabel) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_panoptic(&mut w, l)?;
    Ok(w.flush()?)
}

pub fn load_panoptic(path: impl AsRef<Path>) -> Result<PanopticLabel> {
    read_panoptic(open(path.as_ref())?)
}

pub fn save_boxes(path: impl AsRef<Path>, boxes: &[Box3D]) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_boxes(&mut w, boxes)?;
    Ok(w.flush()?)
}

pub fn load_boxes(path: impl AsRef<Path>) -> Result<Vec<Box3D>> {
    read_boxes(open(path.as_ref())?)
}
