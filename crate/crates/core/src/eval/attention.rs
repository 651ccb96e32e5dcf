//! Attention-map export as CSV and as a plain graymap raster.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::MultiTaskModel;
use crate::pooling::AttentionMap;
use crate::tensor::DenseTensor;
use crate::train::Bag;

pub const ATTENTION_HEADER: &str = "head,instance_index,x,y,weight";

/// Attention of one bag under one task head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionExport {
    pub slide_id: String,
    pub task_id: String,
    /// Instance ids are the bag's source row indices.
    pub map: AttentionMap,
    pub coords: Option<Vec<(u32, u32)>>,
}

/// Runs the model in eval mode and keeps its attention weights.
pub fn attention_export(model: &MultiTaskModel, bag: &Bag, task_id: &str) -> Result<AttentionExport> {
    let (_, mut map) = model.predict(task_id, &bag.features)?;
    map.instance_ids = bag.instance_index.clone();
    Ok(AttentionExport {
        slide_id: bag.slide_id.clone(),
        task_id: task_id.to_string(),
        map,
        coords: bag.coords.clone(),
    })
}

impl AttentionExport {
    /// One row per head and instance, then one `mean` row per instance.
    /// Weights carry 17 significant digits, so parsing them back is exact.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ATTENTION_HEADER}\n");
        let xy = |k: usize| match &self.coords {
            Some(c) => format!("{},{}", c[k].0, c[k].1),
            None => ",".to_string(),
        };
        for h in 0..self.map.heads() {
            for (k, w) in self.map.head(h).iter().enumerate() {
                s.push_str(&format!("{h},{},{},{w:.16e}\n", self.map.instance_ids[k], xy(k)));
            }
        }
        for (k, w) in self.map.mean_over_heads().iter().enumerate() {
            s.push_str(&format!("mean,{},{},{w:.16e}\n", self.map.instance_ids[k], xy(k)));
        }
        s
    }

    /// Plain (`P2`) graymap of mean-over-heads weights on the patch grid,
    /// scaled so the largest weight is 255.
    pub fn to_pgm(&self) -> Result<String> {
        let coords = self
            .coords
            .as_ref()
            .ok_or_else(|| Error::Export("raster needs instance coordinates".into()))?;
        attention_raster(&self.map.mean_over_heads(), coords)
    }
}

/// Reads the per-head rows of an attention CSV back into a map.
pub fn parse_attention_csv(text: &str) -> Result<AttentionMap> {
    let mut lines = text.lines();
    if lines.next() != Some(ATTENTION_HEADER) {
        return Err(Error::Export("attention CSV lacks its header".into()));
    }
    let bad = |l: &str| Error::Export(format!("malformed attention row `{l}`"));
    let mut heads: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(line));
        }
        if f[0] == "mean" {
            continue;
        }
        let h: usize = f[0].parse().map_err(|_| bad(line))?;
        let idx: usize = f[1].parse().map_err(|_| bad(line))?;
        let w: f64 = f[4].parse().map_err(|_| bad(line))?;
        heads.entry(h).or_default().push((idx, w));
    }
    let rows: Vec<Vec<(usize, f64)>> = heads.into_values().collect();
    let first = rows.first().ok_or_else(|| Error::Export("attention CSV has no rows".into()))?;
    let ids: Vec<usize> = first.iter().map(|r| r.0).collect();
    let mut values = Vec::with_capacity(rows.len() * ids.len());
    for r in &rows {
        if r.iter().map(|x| x.0).ne(ids.iter().copied()) {
            return Err(Error::Export("heads list different instances".into()));
        }
        values.extend(r.iter().map(|x| x.1));
    }
    Ok(AttentionMap {
        weights: DenseTensor::matrix(rows.len(), ids.len(), values)?,
        instance_ids: ids,
    })
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

const MAX_RASTER_CELLS: u64 = 1 << 24;

/// Places `weights` on the grid spanned by `coords`. The grid pitch is the
/// greatest common divisor of coordinate offsets; empty cells are 0 and
/// repeated coordinates keep their largest weight.
pub fn attention_raster(weights: &[f64], coords: &[(u32, u32)]) -> Result<String> {
    if weights.len() != coords.len() || weights.is_empty() {
        return Err(Error::Export(format!(
            "{} weights for {} coordinates",
            weights.len(),
            coords.len()
        )));
    }
    let x0 = coords.iter().map(|c| c.0).min().unwrap();
    let y0 = coords.iter().map(|c| c.1).min().unwrap();
    let pitch = coords
        .iter()
        .fold(0, |g, c| gcd(gcd(g, c.0 - x0), c.1 - y0))
        .max(1);
    let w = (coords.iter().map(|c| c.0).max().unwrap() - x0) / pitch + 1;
    let h = (coords.iter().map(|c| c.1).max().unwrap() - y0) / pitch + 1;
    if u64::from(w) * u64::from(h) > MAX_RASTER_CELLS {
        return Err(Error::Export(format!("coordinates span a {w}x{h} grid, too large to raster")));
    }
    let mut cells = vec![0.0f64; (w * h) as usize];
    for (&(x, y), &v) in coords.iter().zip(weights) {
        let i = ((y - y0) / pitch * w + (x - x0) / pitch) as usize;
        cells[i] = cells[i].max(v);
    }
    let max = cells.iter().cloned().fold(0.0, f64::max);
    let mut s = format!("P2\n{w} {h}\n255\n");
    for row in cells.chunks(w as usize) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let g = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
                (g as u8).to_string()
            })
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_places_weights_on_grid() {
        let coords = [(256, 0), (0, 0), (0, 256), (256, 256)];
        let pgm = attention_raster(&[0.5, 0.25, 0.0, 0.25], &coords).unwrap();
        assert_eq!(pgm, "P2\n2 2\n255\n128 255\n0 128\n");
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(parse_attention_csv("nope").is_err());
        assert!(parse_attention_csv(&format!("{ATTENTION_HEADER}\n0,1,,\n")).is_err());
    }
}
