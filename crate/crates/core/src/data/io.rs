use std::fs;
use std::io::Write;
use std::path::Path;

use super::ImuSequence;
use crate::error::{Error, Result};

const MAGIC: &str = "#imuseq v1";
const COLUMNS: [&str; 14] = [
    "t", "gx", "gy", "gz", "ax", "ay", "az", "qw", "qx", "qy", "qz", "px", "py", "pz",
];

/// Writes the sequence CSV to `path`.
pub fn write_sequence(seq: &ImuSequence, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    write_sequence_to(seq, &mut file)?;
    file.flush()?;
    Ok(())
}

/// Writes the sequence CSV to any writer. Values use 17 significant digits.
pub fn write_sequence_to(seq: &ImuSequence, out: &mut impl Write) -> Result<()> {
    seq.validate()?;
    writeln!(
        out,
        "{MAGIC} rate={} gravity_removed={}",
        seq.sample_rate_hz, seq.gravity_removed
    )?;
    writeln!(out, "{}", COLUMNS.join(","))?;
    for i in 0..seq.len() {
        let row = [seq.t[i]]
            .into_iter()
            .chain(seq.gyro[i])
            .chain(seq.accel[i])
            .chain(seq.orientation[i])
            .chain(seq.gt_pos[i])
            .map(|v| format!("{v:.16e}"))
            .collect::<Vec<_>>();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Reads a sequence CSV, reporting problems with file and line.
pub fn read_sequence(path: &Path) -> Result<ImuSequence> {
    let text = fs::read_to_string(path)?;
    let fail = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let (meta, body) = text.split_once('\n').unwrap_or((text.as_str(), ""));
    let (rate, gravity_removed) = parse_meta(meta.trim_end()).map_err(|m| fail(1, m))?;

    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let headers = reader.headers().map_err(|e| fail(2, e.to_string()))?.clone();
    let mut index = [0usize; 14];
    for (slot, name) in index.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| fail(2, format!("missing column `{name}`")))?;
    }

    let mut seq = ImuSequence {
        sample_rate_hz: rate,
        t: Vec::new(),
        gyro: Vec::new(),
        accel: Vec::new(),
        orientation: Vec::new(),
        gt_pos: Vec::new(),
        gravity_removed,
    };
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize + 1);
            fail(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize + 1);
        let mut v = [0.0; 14];
        for (k, (&col, name)) in index.iter().zip(COLUMNS).enumerate() {
            let field = record
                .get(col)
                .ok_or_else(|| fail(line, format!("missing value for `{name}`")))?;
            v[k] = field
                .parse()
                .map_err(|_| fail(line, format!("`{name}` is not a number: {field:?}")))?;
        }
        if let Some(&prev) = seq.t.last() {
            if v[0] <= prev {
                return Err(fail(
                    line,
                    format!("non-monotone time: {} follows {prev}", v[0]),
                ));
            }
            let dt = 1.0 / rate;
            if ((v[0] - prev) - dt).abs() > 0.01 * dt {
                return Err(fail(
                    line,
                    format!("time step {} deviates from 1/rate = {dt}", v[0] - prev),
                ));
            }
        }
        let q = [v[7], v[8], v[9], v[10]];
        let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(fail(line, format!("bad quaternion norm {norm}")));
        }
        seq.t.push(v[0]);
        seq.gyro.push([v[1], v[2], v[3]]);
        seq.accel.push([v[4], v[5], v[6]]);
        seq.orientation.push(q);
        seq.gt_pos.push([v[11], v[12], v[13]]);
    }
    if seq.is_empty() {
        return Err(fail(2, "sequence has no samples".into()));
    }
    Ok(seq)
}

fn parse_meta(line: &str) -> std::result::Result<(f64, bool), String> {
    let rest = line
        .strip_prefix(MAGIC)
        .ok_or_else(|| format!("expected `{MAGIC}` header, got {line:?}"))?;
    let mut rate = None;
    let mut gravity_removed = None;
    for item in rest.split_whitespace() {
        match item.split_once('=') {
            Some(("rate", v)) => {
                let r: f64 = v.parse().map_err(|_| format!("bad rate {v:?}"))?;
                if !(r > 0.0) {
                    return Err(format!("rate must be positive, got {r}"));
                }
                rate = Some(r);
            }
            Some(("gravity_removed", v)) => {
                gravity_removed =
                    Some(v.parse().map_err(|_| format!("bad gravity_removed {v:?}"))?);
            }
            _ => return Err(format!("unknown header item {item:?}")),
        }
    }
    Ok((
        rate.ok_or("header lacks rate")?,
        gravity_removed.ok_or("header lacks gravity_removed")?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(flag: bool) -> ImuSequence {
        let n = 5;
        ImuSequence {
            sample_rate_hz: 100.0,
            t: (0..n).map(|i| i as f64 * 0.01).collect(),
            gyro: (0..n).map(|i| [0.1 * i as f64, -0.2, 1.0 / 3.0]).collect(),
            accel: (0..n).map(|i| [1e-9 * i as f64, 9.81, -2.5]).collect(),
            orientation: vec![[0.5f64.sqrt(), 0.0, 0.0, 0.5f64.sqrt()]; n],
            gt_pos: (0..n).map(|i| [i as f64 * 0.013, 0.0, 1.7]).collect(),
            gravity_removed: flag,
        }
    }

    fn round_trip(seq: &ImuSequence) -> Result<ImuSequence> {
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("s.csv");
        write_sequence(seq, &path)?;
        read_sequence(&path)
    }

    #[test]
    fn write_then_read_round_trips() {
        for flag in [false, true] {
            let seq = tiny(flag);
            let back = round_trip(&seq).unwrap();
            assert_eq!(back, seq);
        }
    }

    fn parse_text(text: &str) -> Result<ImuSequence> {
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("s.csv");
        fs::write(&path, text)?;
        read_sequence(&path)
    }

    #[test]
    fn decreasing_time_is_rejected() {
        let text = "#imuseq v1 rate=100 gravity_removed=false\n\
                    t,gx,gy,gz,ax,ay,az,qw,qx,qy,qz,px,py,pz\n\
                    0.01,0,0,0,0,0,0,1,0,0,0,0,0,0\n\
                    0.00,0,0,0,0,0,0,1,0,0,0,0,0,0\n";
        match parse_text(text) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("non-monotone"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_and_bad_quaternion() {
        let text = "#imuseq v1 rate=100 gravity_removed=true\n\
                    t,gx,gy,gz,ax,ay,az,qw,qx,qy,qz,px,py\n\
                    0,0,0,0,0,0,0,1,0,0,0,0,0\n";
        assert!(matches!(parse_text(text), Err(Error::Parse { msg, .. }) if msg.contains("`pz`")));
        let text = "#imuseq v1 rate=100 gravity_removed=true\n\
                    t,gx,gy,gz,ax,ay,az,qw,qx,qy,qz,px,py,pz\n\
                    0,0,0,0,0,0,0,1,0.1,0,0,0,0,0\n";
        assert!(matches!(parse_text(text), Err(Error::Parse { msg, .. }) if msg.contains("quaternion")));
    }

    #[test]
    fn header_flag_is_read() {
        let text = "#imuseq v1 rate=100 gravity_removed=true\n\
                    t,gx,gy,gz,ax,ay,az,qw,qx,qy,qz,px,py,pz\n\
                    0,0,0,0,0,0,0,1,0,0,0,0,0,0\n";
        assert!(parse_text(text).unwrap().gravity_removed);
    }
}
