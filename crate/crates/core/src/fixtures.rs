//! Robot descriptions used by tests, benchmarks and the CLI.

use std::fmt::Write;

/// Planar torso with a shared waist joint and two 3R arms (7 dof, 2 end effectors).
pub const DUAL_WAIST: &str = include_str!("../fixtures/dual_waist.toml");

/// Planar 3R chain with a large base sphere; roughly half of uniform draws self-collide.
pub const FOLDED_3R: &str = include_str!("../fixtures/folded_3r.toml");

/// Serial planar chain of `n_joints` revolute z-axis joints with equal link lengths.
///
/// The chain is collision-free (no spheres) and ends in a fixed `tip` link.
pub fn planar_chain(n_joints: usize, link_length: f64, limit: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "name = \"planar_{n_joints}r_{link_length}\"");
    let _ = writeln!(s, "end_effectors = [\"tip\"]\n");
    let _ = writeln!(s, "[[links]]\nname = \"base\"\n");
    for i in 1..=n_joints {
        let _ = writeln!(s, "[[links]]\nname = \"link{i}\"\n");
    }
    let _ = writeln!(s, "[[links]]\nname = \"tip\"\n");
    for i in 1..=n_joints {
        let parent = if i == 1 {
            "base".to_string()
        } else {
            format!("link{}", i - 1)
        };
        let offset = if i == 1 { 0.0 } else { link_length };
        let _ = writeln!(
            s,
            "[[joints]]\nname = \"j{i}\"\nkind = \"revolute\"\nparent = \"{parent}\"\nchild = \"link{i}\"\n\
             axis = [0.0, 0.0, 1.0]\norigin = {{ xyz = [{offset:?}, 0.0, 0.0] }}\nlimits = [{:?}, {limit:?}]\n",
            -limit
        );
    }
    let _ = writeln!(
        s,
        "[[joints]]\nname = \"tool\"\nkind = \"fixed\"\nparent = \"link{n_joints}\"\nchild = \"tip\"\n\
         origin = {{ xyz = [{link_length:?}, 0.0, 0.0] }}"
    );
    s
}
