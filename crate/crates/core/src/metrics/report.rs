use std::io::{self, BufRead, Write};

pub const METRICS_HEADER: &str = "video_id,fg_ari_video,fg_ari_image,mbo_video,mbo_image";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub video_id: usize,
    pub fg_ari_video: f64,
    pub fg_ari_image: f64,
    pub mbo_video: f64,
    pub mbo_image: f64,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut out: W) -> io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.video_id, r.fg_ari_video, r.fg_ari_image, r.mbo_video, r.mbo_image
        )?;
    }
    Ok(())
}

pub fn read_metrics_csv<R: BufRead>(input: R) -> io::Result<Vec<MetricsRow>> {
    let bad = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
    let mut lines = input.lines();
    let header = lines.next().transpose()?;
    if header.as_deref() != Some(METRICS_HEADER) {
        return Err(bad("missing metrics header".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(format!("line {}: expected 5 fields", i + 2)));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", i + 2)));
        rows.push(MetricsRow {
            video_id: f[0].parse().map_err(|e| bad(format!("line {}: {e}", i + 2)))?,
            fg_ari_video: num(f[1])?,
            fg_ari_image: num(f[2])?,
            mbo_video: num(f[3])?,
            mbo_image: num(f[4])?,
        });
    }
    Ok(rows)
}
