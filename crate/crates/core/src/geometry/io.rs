//! Point cloud persistence: whitespace ASCII and a little-endian binary form.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{GeometryError, PointCloud};
use crate::mathcore::Vec3;

/// Writes one `x y z` line per point. Values use the shortest decimal form
/// that round-trips, so reading the file back reproduces the exact floats.
pub fn write_cloud_xyz(path: &Path, cloud: &PointCloud) -> Result<(), GeometryError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in cloud.points() {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the ASCII form written by [`write_cloud_xyz`]. Blank lines are
/// skipped; anything else must be exactly three floats.
pub fn read_cloud_xyz(path: &Path) -> Result<PointCloud, GeometryError> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut next = |what: &str| -> Result<f64, GeometryError> {
            it.next()
                .ok_or_else(|| GeometryError::Parse(format!("line {}: missing {what}", lineno + 1)))?
                .parse::<f64>()
                .map_err(|e| GeometryError::Parse(format!("line {}: {e}", lineno + 1)))
        };
        let x = next("x")?;
        let y = next("y")?;
        let z = next("z")?;
        if it.next().is_some() {
            return Err(GeometryError::Parse(format!("line {}: trailing fields", lineno + 1)));
        }
        points.push(Vec3::new(x, y, z));
    }
    PointCloud::new(points)
}

const BIN_MAGIC: &[u8; 4] = b"PCB1";

/// Binary layout: magic `PCB1`, point count as `u32` little-endian, then
/// `3 * N` coordinates as `f64` little-endian. Bit-exact round trip.
pub fn write_cloud_bin(path: &Path, cloud: &PointCloud) -> Result<(), GeometryError> {
    let mut buf = Vec::with_capacity(8 + cloud.len() * 24);
    buf.extend_from_slice(BIN_MAGIC);
    buf.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in cloud.points() {
        for c in p.as_array() {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads the binary form written by [`write_cloud_bin`].
pub fn read_cloud_bin(path: &Path) -> Result<PointCloud, GeometryError> {
    let buf = fs::read(path)?;
    if buf.len() < 8 || &buf[..4] != BIN_MAGIC {
        return Err(GeometryError::Parse("bad magic or truncated header".into()));
    }
    let n = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let expect = 8 + n * 24;
    if buf.len() != expect {
        return Err(GeometryError::Parse(format!(
            "expected {expect} bytes for {n} points, file has {}",
            buf.len()
        )));
    }
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let base = 8 + i * 24;
        let mut c = [0.0f64; 3];
        for (d, slot) in c.iter_mut().enumerate() {
            let o = base + d * 8;
            *slot = f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        }
        points.push(Vec3::new(c[0], c[1], c[2]));
    }
    PointCloud::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn awkward_cloud() -> PointCloud {
        // Values chosen to stress decimal printing: subnormal-ish magnitudes,
        // repeating fractions, negative zero.
        let mut rng = ChaCha8Rng::seed_from_u64(0xC10D);
        let mut pts = vec![
            Vec3::new(1.0 / 3.0, -0.0, 1e-300),
            Vec3::new(f64::MIN_POSITIVE, 12345.678901234567, -2.0 / 7.0),
            Vec3::new(0.1 + 0.2, -1e17, 3.0),
        ];
        for _ in 0..50 {
            pts.push(Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ));
        }
        PointCloud::new(pts).unwrap()
    }

    fn bits(c: &PointCloud) -> Vec<u64> {
        c.points()
            .iter()
            .flat_map(|p| p.as_array().into_iter().map(f64::to_bits))
            .collect()
    }

    #[test]
    fn xyz_round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("c2f_xyz_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cloud.xyz");
        let cloud = awkward_cloud();
        write_cloud_xyz(&path, &cloud).unwrap();
        let back = read_cloud_xyz(&path).unwrap();
        assert_eq!(bits(&cloud), bits(&back));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn bin_round_trip_is_bit_exact_and_detects_truncation() {
        let dir = std::env::temp_dir().join(format!("c2f_bin_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cloud.bin");
        let cloud = awkward_cloud();
        write_cloud_bin(&path, &cloud).unwrap();
        let back = read_cloud_bin(&path).unwrap();
        assert_eq!(bits(&cloud), bits(&back));

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_cloud_bin(&path), Err(GeometryError::Parse(_))));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn xyz_rejects_malformed_lines() {
        let dir = std::env::temp_dir().join(format!("c2f_badxyz_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.xyz");
        fs::write(&path, "0 0 0\n1 2\n").unwrap();
        assert!(matches!(read_cloud_xyz(&path), Err(GeometryError::Parse(_))));
        fs::write(&path, "0 0 0\n1 2 3 4\n").unwrap();
        assert!(matches!(read_cloud_xyz(&path), Err(GeometryError::Parse(_))));
        fs::remove_dir_all(&dir).unwrap();
    }
}
