use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::geometry::{Rotation, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PickPlace,
    Push,
    Pull,
    LiftPegUpright,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::PickPlace, TaskKind::Push, TaskKind::Pull, TaskKind::LiftPegUpright];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PickPlace => "pick_place",
            TaskKind::Push => "push",
            TaskKind::Pull => "pull",
            TaskKind::LiftPegUpright => "lift_peg_upright",
        }
    }

    /// Tasks where the object moves only while held by the gripper.
    pub fn uses_grasp(self) -> bool {
        matches!(self, TaskKind::PickPlace | TaskKind::LiftPegUpright)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "pick_place" | "pickplace" | "stack" => Ok(TaskKind::PickPlace),
            "push" => Ok(TaskKind::Push),
            "pull" => Ok(TaskKind::Pull),
            "lift_peg_upright" | "liftpegupright" | "peg" => Ok(TaskKind::LiftPegUpright),
            other => Err(Error::Config(format!("unknown task kind '{other}'"))),
        }
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (self.min.x..=self.max.x).contains(&p.x)
            && (self.min.y..=self.max.y).contains(&p.y)
            && (self.min.z..=self.max.z).contains(&p.z)
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains(other.min) && self.contains(other.max)
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn half_extent(&self) -> Vec3 {
        (self.max - self.min) * 0.5
    }

    /// Point at fractional coordinates `u ∈ [0,1]³`; `u = 0` gives `min` exactly.
    pub fn lerp(&self, u: [f64; 3]) -> Vec3 {
        Vec3::new(
            self.min.x + (self.max.x - self.min.x) * u[0],
            self.min.y + (self.max.y - self.min.y) * u[1],
            self.min.z + (self.max.z - self.min.z) * u[2],
        )
    }

    fn is_ordered(&self) -> bool {
        self.min.x <= self.max.x && self.min.y <= self.max.y && self.min.z <= self.max.z
    }
}

/// Static description of one task family instance.
///
/// Object positions refer to the object's grasp point, which sits at
/// `table_height` while the object rests on the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Characteristic object size `L_obj` in meters.
    pub object_size: f64,
    pub table_height: f64,
    /// Lift target height (LiftPegUpright).
    pub lift_goal: f64,
    pub upright: Rotation,
    pub horizon: usize,
    pub workspace: Aabb,
    pub obj_range: Aabb,
    /// Goal sampling box; LiftPegUpright places its goal above the object instead.
    pub goal_range: Aabb,
    /// Initial peg tilt range in radians (LiftPegUpright).
    pub tilt_range: (f64, f64),
    pub home: Vec3,
    /// Per-axis translation bound per step.
    pub a_max: f64,
    /// Rotation-vector norm bound per step.
    pub omega_max: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        let l = 0.03;
        let table = 0.0;
        let workspace = Aabb::new(Vec3::new(0.2, -0.25, table), Vec3::new(0.7, 0.25, table + 0.3));
        let (obj_range, goal_range) = match kind {
            TaskKind::PickPlace | TaskKind::LiftPegUpright => (
                Aabb::new(Vec3::new(0.35, -0.12, table), Vec3::new(0.55, 0.12, table)),
                Aabb::new(Vec3::new(0.35, -0.12, table), Vec3::new(0.55, 0.12, table)),
            ),
            TaskKind::Push => (
                Aabb::new(Vec3::new(0.33, -0.10, table), Vec3::new(0.43, 0.10, table)),
                Aabb::new(Vec3::new(0.50, -0.10, table), Vec3::new(0.60, 0.10, table)),
            ),
            TaskKind::Pull => (
                Aabb::new(Vec3::new(0.50, -0.10, table), Vec3::new(0.60, 0.10, table)),
                Aabb::new(Vec3::new(0.33, -0.10, table), Vec3::new(0.43, 0.10, table)),
            ),
        };
        TaskSpec {
            kind,
            object_size: l,
            table_height: table,
            lift_goal: table + 0.10,
            upright: Rotation::IDENTITY,
            horizon: 60,
            workspace,
            obj_range,
            goal_range,
            tilt_range: (0.3, 0.9),
            home: Vec3::new(0.45, 0.0, table + 0.15),
            a_max: 0.02,
            omega_max: 0.1,
            seed: 0,
        }
    }

    pub fn grasp_radius(&self) -> f64 {
        0.6 * self.object_size
    }

    pub fn contact_radius(&self) -> f64 {
        0.75 * self.object_size
    }

    /// Reach exit: end-effector within one object size of the object.
    pub fn reach_threshold(&self) -> f64 {
        self.object_size
    }

    /// Height above the table at which a held object counts as lifted.
    pub fn lift_threshold(&self) -> f64 {
        0.25 * self.object_size
    }

    /// Object–goal margin at which the coarse goal-approach stage ends.
    pub fn near_goal_margin(&self) -> f64 {
        self.object_size
    }

    /// Height band around `lift_goal` ending the Lift stage.
    pub fn lift_band(&self) -> f64 {
        0.25 * (self.lift_goal - self.table_height)
    }

    pub fn success_radius(&self) -> f64 {
        0.5 * self.object_size
    }

    pub fn height_tolerance(&self) -> f64 {
        0.1 * self.object_size
    }

    pub fn upright_tolerance(&self) -> f64 {
        0.1
    }

    pub fn stable_steps(&self) -> u32 {
        5
    }

    /// Minimum object–goal separation enforced at reset.
    pub fn min_goal_separation(&self) -> f64 {
        3.0 * self.object_size
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.object_size > 0.0 && self.object_size.is_finite()) {
            return fail("object_size must be positive");
        }
        if self.horizon < 1 {
            return fail("horizon must be at least 1");
        }
        if !(self.a_max > 0.0 && self.omega_max > 0.0) {
            return fail("action bounds must be positive");
        }
        for (name, b) in [("workspace", &self.workspace), ("rand.obj", &self.obj_range), ("rand.goal", &self.goal_range)] {
            if !b.is_ordered() {
                return Err(Error::Config(format!("{name}: min exceeds max")));
            }
        }
        if !self.workspace.contains_box(&self.obj_range) {
            return fail("object range must lie inside the workspace");
        }
        if self.kind != TaskKind::LiftPegUpright && !self.workspace.contains_box(&self.goal_range) {
            return fail("goal range must lie inside the workspace");
        }
        if !self.workspace.contains(self.home) {
            return fail("home pose must lie inside the workspace");
        }
        if self.kind == TaskKind::LiftPegUpright {
            if self.lift_goal <= self.table_height {
                return fail("lift_goal must exceed table_height");
            }
            if self.lift_goal > self.workspace.max.z {
                return fail("lift_goal must lie inside the workspace");
            }
            let (lo, hi) = self.tilt_range;
            if !(0.0 <= lo && lo <= hi && hi < PI) {
                return fail("rand.tilt must satisfy 0 <= min <= max < pi");
            }
        }
        if !self.upright.is_valid(1e-9) {
            return fail("upright target is not a rotation");
        }
        Ok(())
    }

    /// Build from parsed `key = value` pairs; unknown keys are ignored so a
    /// single file can carry both task and run settings.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let kind: TaskKind = kv.require("kind")?.parse()?;
        let mut spec = TaskSpec::new(kind);
        if let Some(v) = kv.parse_f64("object_size")? {
            spec.object_size = v;
        }
        if let Some(v) = kv.parse_f64("table_height")? {
            spec.table_height = v;
        }
        if let Some(v) = kv.parse_f64("lift_goal")? {
            spec.lift_goal = v;
        }
        if let Some(v) = kv.value::<usize>("horizon")? {
            spec.horizon = v;
        }
        if let Some(v) = kv.value::<u64>("seed")? {
            spec.seed = v;
        }
        if let Some(v) = kv.parse_f64("a_max")? {
            spec.a_max = v;
        }
        if let Some(v) = kv.parse_f64("omega_max")? {
            spec.omega_max = v;
        }
        if let Some(v) = kv.parse_vec3("home")? {
            spec.home = v;
        }
        if let Some(v) = kv.parse_vec3("workspace.min")? {
            spec.workspace.min = v;
        }
        if let Some(v) = kv.parse_vec3("workspace.max")? {
            spec.workspace.max = v;
        }
        if let Some(v) = kv.parse_vec3("rand.obj.min")? {
            spec.obj_range.min = v;
        }
        if let Some(v) = kv.parse_vec3("rand.obj.max")? {
            spec.obj_range.max = v;
        }
        if let Some(v) = kv.parse_vec3("rand.goal.min")? {
            spec.goal_range.min = v;
        }
        if let Some(v) = kv.parse_vec3("rand.goal.max")? {
            spec.goal_range.max = v;
        }
        if let Some(v) = kv.parse_list_f64("rand.tilt")? {
            if v.len() != 2 {
                return Err(Error::Config("rand.tilt expects 'min, max'".into()));
            }
            spec.tilt_range = (v[0], v[1]);
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Render as `key = value` text accepted by [`TaskSpec::from_key_values`].
    pub fn to_config_text(&self) -> String {
        let v = |p: Vec3| format!("{}, {}, {}", p.x, p.y, p.z);
        let mut out = String::new();
        let mut line = |k: &str, val: String| out.push_str(&format!("{k} = {val}\n"));
        line("kind", self.kind.name().into());
        line("object_size", self.object_size.to_string());
        line("table_height", self.table_height.to_string());
        line("lift_goal", self.lift_goal.to_string());
        line("horizon", self.horizon.to_string());
        line("seed", self.seed.to_string());
        line("a_max", self.a_max.to_string());
        line("omega_max", self.omega_max.to_string());
        line("home", v(self.home));
        line("workspace.min", v(self.workspace.min));
        line("workspace.max", v(self.workspace.max));
        line("rand.obj.min", v(self.obj_range.min));
        line("rand.obj.max", v(self.obj_range.max));
        line("rand.goal.min", v(self.goal_range.min));
        line("rand.goal.max", v(self.goal_range.max));
        line("rand.tilt", format!("{}, {}", self.tilt_range.0, self.tilt_range.1));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for kind in TaskKind::ALL {
            TaskSpec::new(kind).validate().unwrap();
        }
    }

    #[test]
    fn config_text_round_trip() {
        let mut spec = TaskSpec::new(TaskKind::LiftPegUpright);
        spec.seed = 17;
        spec.horizon = 45;
        let kv = KeyValues::parse(&spec.to_config_text()).unwrap();
        assert_eq!(TaskSpec::from_key_values(&kv).unwrap(), spec);
    }

    #[test]
    fn rejects_bad_geometry() {
        let kv = KeyValues::parse("kind = push\nobject_size = -1\n").unwrap();
        assert!(TaskSpec::from_key_values(&kv).is_err());
        let kv = KeyValues::parse("kind = lift_peg_upright\nlift_goal = -0.5\n").unwrap();
        assert!(TaskSpec::from_key_values(&kv).is_err());
        let kv = KeyValues::parse("kind = pick_place\nrand.obj.max = 2, 0, 0\n").unwrap();
        assert!(TaskSpec::from_key_values(&kv).is_err());
        assert!("stack-cubes".parse::<TaskKind>().is_err());
    }
}
