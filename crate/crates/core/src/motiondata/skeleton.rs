use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{add, norm, Vec3};

/// Joint hierarchy in topological order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonDef {
    pub joint_names: Vec<String>,
    /// `-1` for the root, otherwise an index smaller than the joint's own.
    pub parent_index: Vec<i32>,
    pub offsets: Vec<Vec3<f64>>,
    pub foot_joint_indices: Vec<usize>,
    /// End-site offsets for leaf joints, kept so BVH output stays complete.
    #[serde(default)]
    pub end_sites: Vec<Option<Vec3<f64>>>,
}

impl SkeletonDef {
    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        usize::try_from(self.parent_index[j]).ok()
    }

    pub fn children(&self, j: usize) -> Vec<usize> {
        (0..self.num_joints()).filter(|&c| self.parent(c) == Some(j)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_joints();
        ensure!(n > 0, Error::Data("skeleton has no joints".into()));
        ensure!(
            self.parent_index.len() == n && self.offsets.len() == n && self.end_sites.len() == n,
            Error::Data("skeleton field lengths disagree".into())
        );
        ensure!(self.parent_index[0] == -1, Error::Data("joint 0 must be the root".into()));
        for (i, &p) in self.parent_index.iter().enumerate().skip(1) {
            ensure!(
                p >= 0 && (p as usize) < i,
                Error::Data(format!("joint {i} has parent {p}, expected an earlier joint"))
            );
        }
        for &f in &self.foot_joint_indices {
            ensure!(f < n, Error::Data(format!("foot joint {f} out of range")));
        }
        ensure!(
            self.offsets.iter().flatten().all(|v| v.is_finite()),
            Error::Data("non-finite offset".into())
        );
        Ok(())
    }

    /// Picks foot joints by name: the first joint containing "foot" or
    /// "ankle" on each side. Falls back to an empty list.
    pub fn detect_feet(&mut self) {
        let mut feet = Vec::new();
        for side in ["left", "right"] {
            let found = self.joint_names.iter().position(|name| {
                let n = name.to_lowercase();
                let sided = n.contains(side) || n.starts_with(&side[..1]);
                sided && (n.contains("foot") || n.contains("ankle"))
            });
            if let Some(j) = found {
                feet.push(j);
            }
        }
        self.foot_joint_indices = feet;
    }

    /// World positions of every joint in the rest pose with the root at the origin.
    pub fn rest_positions(&self) -> Vec<Vec3<f64>> {
        let mut out: Vec<Vec3<f64>> = Vec::with_capacity(self.num_joints());
        for j in 0..self.num_joints() {
            let p = match self.parent(j) {
                Some(p) => add(out[p], self.offsets[j]),
                None => [0.0; 3],
            };
            out.push(p);
        }
        out
    }

    /// Height of `joint` above the lowest rest-pose point, end sites included.
    pub fn rest_height_above_ground(&self, joint: usize) -> f64 {
        let rest = self.rest_positions();
        let mut lowest = f64::INFINITY;
        for (j, p) in rest.iter().enumerate() {
            lowest = lowest.min(p[1]);
            if let Some(e) = self.end_sites[j] {
                lowest = lowest.min(p[1] + e[1]);
            }
        }
        rest[joint][1] - lowest
    }

    /// Sum of bone lengths from the first foot up to (excluding) the root's child.
    pub fn leg_length(&self) -> f64 {
        let Some(&foot) = self.foot_joint_indices.first() else {
            return self.offsets.iter().map(|&o| norm(o)).fold(0.0, f64::max);
        };
        let mut len = 0.0;
        let mut j = foot;
        while let Some(p) = self.parent(j) {
            if self.parent(p).is_none() {
                break;
            }
            len += norm(self.offsets[j]);
            j = p;
        }
        len
    }

    /// The 19-joint biped used by the synthetic generator (metres, Y up, Z forward).
    pub fn synthetic() -> Self {
        let joints: [(&str, i32, Vec3<f64>); 19] = [
            ("Hips", -1, [0.0, 0.0, 0.0]),
            ("Spine", 0, [0.0, 0.10, 0.0]),
            ("Chest", 1, [0.0, 0.15, 0.0]),
            ("Neck", 2, [0.0, 0.20, 0.0]),
            ("Head", 3, [0.0, 0.10, 0.0]),
            ("LeftArm", 2, [0.18, 0.17, 0.0]),
            ("LeftForeArm", 5, [0.0, -0.28, 0.0]),
            ("LeftHand", 6, [0.0, -0.25, 0.0]),
            ("RightArm", 2, [-0.18, 0.17, 0.0]),
            ("RightForeArm", 8, [0.0, -0.28, 0.0]),
            ("RightHand", 9, [0.0, -0.25, 0.0]),
            ("LeftUpLeg", 0, [0.09, -0.05, 0.0]),
            ("LeftLeg", 11, [0.0, -0.45, 0.0]),
            ("LeftFoot", 12, [0.0, -0.42, 0.0]),
            ("LeftToe", 13, [0.0, -0.06, 0.12]),
            ("RightUpLeg", 0, [-0.09, -0.05, 0.0]),
            ("RightLeg", 15, [0.0, -0.45, 0.0]),
            ("RightFoot", 16, [0.0, -0.42, 0.0]),
            ("RightToe", 17, [0.0, -0.06, 0.12]),
        ];
        let mut end_sites = vec![None; joints.len()];
        end_sites[4] = Some([0.0, 0.12, 0.0]);
        end_sites[7] = Some([0.0, -0.08, 0.0]);
        end_sites[10] = Some([0.0, -0.08, 0.0]);
        end_sites[14] = Some([0.0, 0.0, 0.05]);
        end_sites[18] = Some([0.0, 0.0, 0.05]);
        SkeletonDef {
            joint_names: joints.iter().map(|j| j.0.to_string()).collect(),
            parent_index: joints.iter().map(|j| j.1).collect(),
            offsets: joints.iter().map(|j| j.2).collect(),
            foot_joint_indices: vec![13, 17],
            end_sites,
        }
    }
}
