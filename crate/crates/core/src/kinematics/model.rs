use std::collections::HashMap;

use nalgebra::{Isometry3, Vector3};
use rand::Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{KinematicsError, Pose};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub name: String,
    pub spheres: Vec<Sphere>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointKind {
    Revolute,
    Prismatic,
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    pub name: String,
    pub kind: JointKind,
    pub axis: Vector3<f64>,
    pub origin: Pose,
    pub limits: Option<(f64, f64)>,
    pub parent_link: usize,
    pub child_link: usize,
}

/// Validated kinematic tree.
///
/// Joint order in the source document defines the index order of the
/// configuration vector; fixed joints take no index.
#[derive(Debug, Clone)]
pub struct RobotModel {
    pub(crate) name: String,
    pub(crate) links: Vec<Link>,
    pub(crate) joints: Vec<JointSpec>,
    pub(crate) actuated_index: Vec<Option<usize>>,
    pub(crate) end_effectors: Vec<usize>,
    pub(crate) dof: usize,
    pub(crate) root: usize,
    /// Joints sorted so every parent transform is available before its children.
    pub(crate) joint_order: Vec<usize>,
    /// Joint ids on the root-to-EE path, root first.
    pub(crate) ee_paths: Vec<Vec<usize>>,
    /// Sphere pairs `(link_a, sphere_a, link_b, sphere_b)` that are collision candidates.
    pub(crate) collision_pairs: Vec<(usize, usize, usize, usize)>,
    pub(crate) origins: Vec<Isometry3<f64>>,
    pub(crate) source_hash: [u8; 32],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRobot {
    name: String,
    links: Vec<RawLink>,
    #[serde(default)]
    joints: Vec<RawJoint>,
    end_effectors: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    name: String,
    #[serde(default)]
    spheres: Vec<RawSphere>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSphere {
    center: [f64; 3],
    radius: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawJoint {
    name: String,
    kind: String,
    parent: String,
    child: String,
    #[serde(default)]
    axis: Option<[f64; 3]>,
    #[serde(default)]
    origin: Option<RawOrigin>,
    #[serde(default)]
    limits: Option<[f64; 2]>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawOrigin {
    #[serde(default)]
    xyz: [f64; 3],
    #[serde(default)]
    rpy: [f64; 3],
}

/// Parses and validates a robot description document.
pub fn parse_robot(text: &str) -> Result<RobotModel, KinematicsError> {
    let raw: RawRobot = toml::from_str(text).map_err(|e| KinematicsError::Parse(e.to_string()))?;
    let source_hash: [u8; 32] = Sha256::digest(text.as_bytes()).into();

    let mut link_ids = HashMap::new();
    let mut links = Vec::with_capacity(raw.links.len());
    for l in raw.links {
        if link_ids.insert(l.name.clone(), links.len()).is_some() {
            return Err(KinematicsError::Schema {
                entity: format!("link `{}`", l.name),
                reason: "duplicate link name".into(),
            });
        }
        let mut spheres = Vec::with_capacity(l.spheres.len());
        for s in l.spheres {
            if !(s.radius > 0.0) || s.center.iter().any(|c| !c.is_finite()) {
                return Err(KinematicsError::Schema {
                    entity: format!("link `{}`", l.name),
                    reason: "sphere needs a finite center and positive radius".into(),
                });
            }
            spheres.push(Sphere {
                center: Vector3::from(s.center),
                radius: s.radius,
            });
        }
        links.push(Link { name: l.name, spheres });
    }
    if links.is_empty() {
        return Err(KinematicsError::Schema {
            entity: format!("robot `{}`", raw.name),
            reason: "no links".into(),
        });
    }

    let lookup = |joint: &str, link: &str| -> Result<usize, KinematicsError> {
        link_ids.get(link).copied().ok_or_else(|| KinematicsError::UnknownLink {
            entity: format!("joint `{joint}`"),
            link: link.to_string(),
        })
    };

    let mut joints = Vec::with_capacity(raw.joints.len());
    let mut joint_names = HashMap::new();
    let mut link_parent_joint: Vec<Option<usize>> = vec![None; links.len()];
    let mut actuated_index = Vec::with_capacity(raw.joints.len());
    let mut dof = 0;
    for j in raw.joints {
        if joint_names.insert(j.name.clone(), joints.len()).is_some() {
            return Err(KinematicsError::Schema {
                entity: format!("joint `{}`", j.name),
                reason: "duplicate joint name".into(),
            });
        }
        let kind = match j.kind.as_str() {
            "revolute" => JointKind::Revolute,
            "prismatic" => JointKind::Prismatic,
            "fixed" => JointKind::Fixed,
            other => {
                return Err(KinematicsError::Schema {
                    entity: format!("joint `{}`", j.name),
                    reason: format!("unknown kind `{other}`"),
                })
            }
        };
        let parent_link = lookup(&j.name, &j.parent)?;
        let child_link = lookup(&j.name, &j.child)?;
        if parent_link == child_link {
            return Err(KinematicsError::Cycle { joint: j.name.clone() });
        }
        if link_parent_joint[child_link].is_some() {
            return Err(KinematicsError::Schema {
                entity: format!("link `{}`", j.child),
                reason: "link has more than one parent joint".into(),
            });
        }
        link_parent_joint[child_link] = Some(joints.len());

        let axis = match (kind, j.axis) {
            (JointKind::Fixed, a) => a.map(Vector3::from).unwrap_or_else(Vector3::z),
            (_, None) => {
                return Err(KinematicsError::Schema {
                    entity: format!("joint `{}`", j.name),
                    reason: "missing axis".into(),
                })
            }
            (_, Some(a)) => {
                let a = Vector3::from(a);
                if (a.norm() - 1.0).abs() > 1e-9 {
                    return Err(KinematicsError::NonUnitAxis {
                        joint: j.name.clone(),
                        norm: a.norm(),
                    });
                }
                a
            }
        };
        let limits = match (kind, j.limits) {
            (JointKind::Fixed, _) => None,
            (_, Some([lo, hi])) => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(KinematicsError::InvalidLimits {
                        joint: j.name.clone(),
                        lo,
                        hi,
                    });
                }
                Some((lo, hi))
            }
            (_, None) => None,
        };
        let origin = j.origin.unwrap_or_default();
        if kind == JointKind::Fixed {
            actuated_index.push(None);
        } else {
            actuated_index.push(Some(dof));
            dof += 1;
        }
        joints.push(JointSpec {
            name: j.name,
            kind,
            axis,
            origin: Pose::from_xyz_rpy(origin.xyz, origin.rpy),
            limits,
            parent_link,
            child_link,
        });
    }

    // Walk each link up to its root; a revisit means a cycle.
    for start in 0..links.len() {
        let mut seen = vec![false; links.len()];
        let mut cur = start;
        while let Some(j) = link_parent_joint[cur] {
            if seen[cur] {
                return Err(KinematicsError::Cycle {
                    joint: joints[j].name.clone(),
                });
            }
            seen[cur] = true;
            cur = joints[j].parent_link;
        }
    }
    let roots: Vec<usize> = (0..links.len()).filter(|&l| link_parent_joint[l].is_none()).collect();
    if roots.len() != 1 {
        let names: Vec<&str> = roots.iter().map(|&l| links[l].name.as_str()).collect();
        return Err(KinematicsError::Schema {
            entity: format!("robot `{}`", raw.name),
            reason: format!("expected a single root link, found {names:?}"),
        });
    }
    let root = roots[0];

    let mut children: Vec<Vec<usize>> = vec![Vec::new(); links.len()];
    for (ji, j) in joints.iter().enumerate() {
        children[j.parent_link].push(ji);
    }
    let mut joint_order = Vec::with_capacity(joints.len());
    let mut stack = vec![root];
    while let Some(l) = stack.pop() {
        for &ji in children[l].iter().rev() {
            joint_order.push(ji);
            stack.push(joints[ji].child_link);
        }
    }

    if raw.end_effectors.is_empty() {
        return Err(KinematicsError::Schema {
            entity: format!("robot `{}`", raw.name),
            reason: "no end effectors".into(),
        });
    }
    let mut end_effectors = Vec::with_capacity(raw.end_effectors.len());
    for ee in &raw.end_effectors {
        let id = link_ids.get(ee).copied().ok_or_else(|| KinematicsError::UnknownLink {
            entity: "end_effectors".into(),
            link: ee.clone(),
        })?;
        end_effectors.push(id);
    }
    let ee_paths = end_effectors
        .iter()
        .map(|&ee| {
            let mut path = Vec::new();
            let mut cur = ee;
            while let Some(j) = link_parent_joint[cur] {
                path.push(j);
                cur = joints[j].parent_link;
            }
            path.reverse();
            path
        })
        .collect();

    let adjacent = |a: usize, b: usize| {
        joints
            .iter()
            .any(|j| (j.parent_link == a && j.child_link == b) || (j.parent_link == b && j.child_link == a))
    };
    let mut collision_pairs = Vec::new();
    for a in 0..links.len() {
        for b in (a + 1)..links.len() {
            if adjacent(a, b) {
                continue;
            }
            for sa in 0..links[a].spheres.len() {
                for sb in 0..links[b].spheres.len() {
                    collision_pairs.push((a, sa, b, sb));
                }
            }
        }
    }
    let origins = joints.iter().map(|j| j.origin.to_isometry()).collect();

    Ok(RobotModel {
        name: raw.name,
        links,
        joints,
        actuated_index,
        end_effectors,
        dof,
        root,
        joint_order,
        ee_paths,
        collision_pairs,
        origins,
        source_hash,
    })
}

impl RobotModel {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn n_ee(&self) -> usize {
        self.end_effectors.len()
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn root_link(&self) -> usize {
        self.root
    }

    pub fn end_effectors(&self) -> &[usize] {
        &self.end_effectors
    }

    pub fn end_effector_names(&self) -> Vec<&str> {
        self.end_effectors
            .iter()
            .map(|&l| self.links[l].name.as_str())
            .collect()
    }

    /// Configuration index of joint `j`, `None` for fixed joints.
    pub fn actuated_index(&self, j: usize) -> Option<usize> {
        self.actuated_index[j]
    }

    /// Actuated joints in configuration order.
    pub fn actuated_joints(&self) -> impl Iterator<Item = &JointSpec> {
        self.joints.iter().filter(|j| j.kind != JointKind::Fixed)
    }

    /// Joint ids on the path from the root to end effector `ee`.
    pub fn ee_path(&self, ee: usize) -> &[usize] {
        &self.ee_paths[ee]
    }

    /// Digest of the description text this model was parsed from.
    pub fn source_hash(&self) -> [u8; 32] {
        self.source_hash
    }

    /// `(lo, hi)` of every actuated joint, in configuration order.
    pub fn limits(&self) -> Result<Vec<(f64, f64)>, KinematicsError> {
        self.actuated_joints()
            .map(|j| {
                j.limits
                    .ok_or_else(|| KinematicsError::Unbounded { joint: j.name.clone() })
            })
            .collect()
    }

    pub(crate) fn check_dim(&self, q: &[f64]) -> Result<(), KinematicsError> {
        if q.len() != self.dof {
            return Err(KinematicsError::DimensionMismatch {
                expected: self.dof,
                got: q.len(),
            });
        }
        Ok(())
    }
}

/// Draws each joint independently and uniformly within its limits.
pub fn sample_config<R: Rng + ?Sized>(model: &RobotModel, rng: &mut R) -> Result<Vec<f64>, KinematicsError> {
    let limits = model.limits()?;
    Ok(sample_within(&limits, rng))
}

pub(crate) fn sample_within<R: Rng + ?Sized>(limits: &[(f64, f64)], rng: &mut R) -> Vec<f64> {
    limits
        .iter()
        .map(|&(lo, hi)| (lo + (hi - lo) * rng.random::<f64>()).clamp(lo, hi))
        .collect()
}
