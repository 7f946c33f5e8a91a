use super::ModelSnapshot;
use crate::Result;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleDeviation {
    /// Parameter name without its last segment, e.g. `layer.0.attention.query`.
    pub module: String,
    pub l2: f64,
    pub initial_norm: f64,
    /// `l2 / initial_norm`; absent when the module starts at zero.
    pub relative: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub modules: Vec<ModuleDeviation>,
    pub total_l2: f64,
    pub total_relative: Option<f64>,
}

fn module_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(m, _)| m)
}

/// L2 distance between two snapshots, per module and overall.
pub fn parameter_deviation(
    theta0: &ModelSnapshot,
    theta1: &ModelSnapshot,
) -> Result<DeviationReport> {
    theta0.check_layout(theta1)?;
    let mut modules: Vec<(String, f64, f64)> = Vec::new();
    for e in &theta0.entries {
        let module = module_of(&e.name);
        let (mut sq, mut base) = (0.0, 0.0);
        for (a, b) in theta0.slice(e).iter().zip(theta1.slice(e)) {
            sq += (b - a) * (b - a);
            base += a * a;
        }
        match modules.last_mut() {
            Some(last) if last.0 == module => {
                last.1 += sq;
                last.2 += base;
            }
            _ => modules.push((module.to_string(), sq, base)),
        }
    }
    let relative = |l2: f64, norm: f64| (norm > 0.0).then(|| l2 / norm);
    let total_sq: f64 = modules.iter().map(|m| m.1).sum();
    let total_base: f64 = modules.iter().map(|m| m.2).sum();
    Ok(DeviationReport {
        modules: modules
            .into_iter()
            .map(|(module, sq, base)| ModuleDeviation {
                module,
                l2: sq.sqrt(),
                initial_norm: base.sqrt(),
                relative: relative(sq.sqrt(), base.sqrt()),
            })
            .collect(),
        total_l2: total_sq.sqrt(),
        total_relative: relative(total_sq.sqrt(), total_base.sqrt()),
    })
}

#[cfg(test)]
mod tests {
    use super::super::SnapshotEntry;
    use super::*;

    fn snap(vals: &[f64]) -> ModelSnapshot {
        ModelSnapshot {
            entries: vec![
                SnapshotEntry {
                    name: "a.weight".into(),
                    shape: vec![1],
                    offset: 0,
                    length: 1,
                },
                SnapshotEntry {
                    name: "a.bias".into(),
                    shape: vec![1],
                    offset: 1,
                    length: 1,
                },
                SnapshotEntry {
                    name: "b.weight".into(),
                    shape: vec![1],
                    offset: 2,
                    length: 1,
                },
            ],
            values: vals.to_vec(),
        }
    }

    #[test]
    fn identical_snapshots_have_zero_deviation() {
        let s = snap(&[1.0, 2.0, 3.0]);
        let r = parameter_deviation(&s, &s).unwrap();
        assert_eq!(r.total_l2, 0.0);
        assert!(r.modules.iter().all(|m| m.l2 == 0.0));
    }

    #[test]
    fn grouped_by_module() {
        let r = parameter_deviation(&snap(&[3.0, 0.0, 3.0]), &snap(&[7.0, 3.0, 3.0])).unwrap();
        assert_eq!(r.modules.len(), 2);
        assert_eq!(r.modules[0].module, "a");
        assert_eq!(r.modules[0].l2, 5.0);
        assert_eq!(r.modules[0].relative, Some(5.0 / 3.0));
        assert_eq!(r.modules[1].l2, 0.0);
        assert_eq!(r.total_l2, 5.0);
    }

    #[test]
    fn scalar_group_distance() {
        let e = vec![SnapshotEntry {
            name: "s.value".into(),
            shape: vec![1],
            offset: 0,
            length: 1,
        }];
        let a = ModelSnapshot {
            entries: e.clone(),
            values: vec![3.0],
        };
        let b = ModelSnapshot {
            entries: e,
            values: vec![7.0],
        };
        assert_eq!(parameter_deviation(&a, &b).unwrap().total_l2, 4.0);
    }
}
