use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;

/// What a client uploads after a round. The Q-Prompt stays on the client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub round: usize,
    pub g_prompt: Mat,
    pub d_prompts: Vec<Mat>,
    /// `touched[m]` is true iff at least one sample was routed to slot `m`.
    pub touched: Vec<bool>,
    pub num_samples: usize,
}

/// How the per-domain indicator is decided during D-Prompt aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TouchRule {
    /// Use the flags the client reported.
    Structural,
    /// A slot counts as touched when any coordinate differs from the download.
    Numeric,
}

fn sorted(updates: &[ClientUpdate]) -> Vec<&ClientUpdate> {
    let mut v: Vec<&ClientUpdate> = updates.iter().collect();
    v.sort_by_key(|u| u.client_id);
    v
}

/// Sample-count weighted mean of the uploaded G-Prompts.
pub fn aggregate_gprompt(updates: &[ClientUpdate]) -> Result<Mat> {
    let ups = sorted(updates);
    let first = ups.first().ok_or(Error::Empty { op: "aggregate_gprompt" })?;
    let total: usize = ups.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Err(Error::Aggregation("zero total sample weight".into()));
    }
    let (rows, cols) = first.g_prompt.shape();
    let mut out = Mat::zeros(rows, cols);
    for u in ups {
        if u.g_prompt.shape() != (rows, cols) {
            return Err(Error::Aggregation(format!("client {} uploaded a G-Prompt of shape {:?}", u.client_id, u.g_prompt.shape())));
        }
        out.add_scaled(u.num_samples as f64 / total as f64, &u.g_prompt)?;
    }
    Ok(out)
}

pub fn numeric_touch(prev: &[Mat], update: &ClientUpdate) -> Vec<bool> {
    prev.iter()
        .zip(&update.d_prompts)
        .map(|(p, u)| p.as_slice() != u.as_slice())
        .collect()
}

/// Domain-wise weighted-delta aggregation. Only clients that touched a slot
/// contribute to it; a slot nobody touched is returned unchanged.
pub fn aggregate_dprompts(prev: &[Mat], updates: &[ClientUpdate], rule: TouchRule) -> Result<Vec<Mat>> {
    let ups = sorted(updates);
    for u in &ups {
        if u.d_prompts.len() != prev.len() || u.touched.len() != prev.len() {
            return Err(Error::Aggregation(format!(
                "client {} uploaded {} D-Prompts for {} domains",
                u.client_id,
                u.d_prompts.len(),
                prev.len()
            )));
        }
        if let Some(m) = (0..prev.len()).find(|&m| u.d_prompts[m].shape() != prev[m].shape()) {
            return Err(Error::Aggregation(format!("client {} D-Prompt {m} has the wrong shape", u.client_id)));
        }
    }
    let flags: Vec<Vec<bool>> = ups
        .iter()
        .map(|u| match rule {
            TouchRule::Structural => u.touched.clone(),
            TouchRule::Numeric => numeric_touch(prev, u),
        })
        .collect();

    let mut out = Vec::with_capacity(prev.len());
    for (m, base) in prev.iter().enumerate() {
        let weight: usize = ups
            .iter()
            .zip(&flags)
            .filter(|(_, f)| f[m])
            .map(|(u, _)| u.num_samples)
            .sum();
        if weight == 0 {
            out.push(base.clone());
            continue;
        }
        let mut delta = vec![0.0; base.as_slice().len()];
        for (u, f) in ups.iter().zip(&flags) {
            if !f[m] {
                continue;
            }
            let w = u.num_samples as f64 / weight as f64;
            for ((d, new), old) in delta.iter_mut().zip(u.d_prompts[m].as_slice()).zip(base.as_slice()) {
                *d += w * (new - old);
            }
        }
        let mut next = base.clone();
        for (v, d) in next.as_mut_slice().iter_mut().zip(&delta) {
            *v += d;
        }
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(v: &[f64]) -> Mat {
        Mat::from_vec(1, v.len(), v.to_vec()).unwrap()
    }

    fn update(id: usize, n: usize, g: &[f64], d: Vec<Mat>, touched: Vec<bool>) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            round: 0,
            g_prompt: mat(g),
            d_prompts: d,
            touched,
            num_samples: n,
        }
    }

    #[test]
    fn gprompt_examples() {
        let a = [1.0, -2.0, 0.5];
        let b = [3.0, 2.0, -1.5];
        let single = aggregate_gprompt(&[update(4, 7, &a, vec![], vec![])]).unwrap();
        assert_eq!(single.as_slice(), &a);
        let two = aggregate_gprompt(&[update(1, 10, &a, vec![], vec![]), update(0, 30, &b, vec![], vec![])]).unwrap();
        for k in 0..3 {
            assert!((two.as_slice()[k] - (0.25 * a[k] + 0.75 * b[k])).abs() < 1e-12);
        }
        assert!(aggregate_gprompt(&[]).is_err());
        assert!(aggregate_gprompt(&[update(0, 0, &a, vec![], vec![])]).is_err());
    }

    #[test]
    fn dprompt_examples() {
        let prev = vec![mat(&[0.0, 1.0]), mat(&[5.0, 5.0])];
        let ua = update(0, 10, &[0.0], vec![mat(&[1.0, 1.0]), prev[1].clone()], vec![true, false]);
        let ub = update(1, 30, &[0.0], vec![mat(&[0.0, 3.0]), prev[1].clone()], vec![true, false]);
        let out = aggregate_dprompts(&prev, &[ub.clone(), ua.clone()], TouchRule::Structural).unwrap();
        assert!((out[0].as_slice()[0] - 0.25).abs() < 1e-12);
        assert!((out[0].as_slice()[1] - 2.5).abs() < 1e-12);
        assert_eq!(out[1], prev[1]);

        let only = aggregate_dprompts(&prev, &[ua.clone()], TouchRule::Structural).unwrap();
        assert_eq!(only[0].as_slice(), &[1.0, 1.0]);

        let numeric = aggregate_dprompts(&prev, &[ua, ub], TouchRule::Numeric).unwrap();
        assert_eq!(numeric, out);
    }

    #[test]
    fn client_update_schema_has_no_query_prompt() {
        let u = update(0, 1, &[0.5], vec![mat(&[1.0])], vec![true]);
        let v: serde_json::Value = serde_json::from_str(&serde_json::to_string(&u).unwrap()).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert!(keys.iter().all(|k| !k.starts_with('q')));
        let injected = r#"{"client_id":0,"round":0,"g_prompt":{"rows":1,"cols":1,"data":[0.5]},
            "d_prompts":[],"touched":[],"num_samples":1,"q_prompt":[1.0]}"#;
        assert!(serde_json::from_str::<ClientUpdate>(injected).is_err());
    }
}
