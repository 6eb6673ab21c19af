use std::path::Path;

use anyhow::{Context, Result};
use serde_json::json;
use treeik::kinematics::{parse_robot, JointKind, RobotModel};

fn kind(k: JointKind) -> &'static str {
    match k {
        JointKind::Revolute => "revolute",
        JointKind::Prismatic => "prismatic",
        JointKind::Fixed => "fixed",
    }
}

pub fn summary(model: &RobotModel) -> serde_json::Value {
    let links = model.links();
    let joints: Vec<_> = model
        .joints()
        .iter()
        .enumerate()
        .map(|(j, s)| {
            json!({
                "name": s.name,
                "kind": kind(s.kind),
                "parent": links[s.parent_link].name,
                "child": links[s.child_link].name,
                "index": model.actuated_index(j),
                "limits": s.limits.map(|(lo, hi)| [lo, hi]),
            })
        })
        .collect();
    let ees: Vec<_> = (0..model.n_ee())
        .map(|e| {
            json!({
                "link": links[model.end_effectors()[e]].name,
                "path": model.ee_path(e).iter().map(|&j| model.joints()[j].name.as_str()).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({
        "name": model.name(),
        "dof": model.dof(),
        "n_ee": model.n_ee(),
        "root": links[model.root_link()].name,
        "links": links.iter().map(|l| json!({ "name": l.name, "spheres": l.spheres.len() })).collect::<Vec<_>>(),
        "joints": joints,
        "end_effectors": ees,
    })
}

pub fn text(model: &RobotModel) -> String {
    let links = model.links();
    let mut s = format!(
        "{}: dof={}, end_effectors={}, links={}, root={}\njoints:\n",
        model.name(),
        model.dof(),
        model.n_ee(),
        links.len(),
        links[model.root_link()].name
    );
    for (j, spec) in model.joints().iter().enumerate() {
        let index = model.actuated_index(j).map_or("-".to_string(), |i| format!("q{i}"));
        let limits = spec.limits.map_or(String::new(), |(lo, hi)| format!(" [{lo}, {hi}]"));
        s.push_str(&format!(
            "  {:<4} {:<16} {:<9} {} -> {}{}\n",
            index,
            spec.name,
            kind(spec.kind),
            links[spec.parent_link].name,
            links[spec.child_link].name,
            limits
        ));
    }
    s.push_str("end effectors:\n");
    for e in 0..model.n_ee() {
        let path: Vec<&str> = model
            .ee_path(e)
            .iter()
            .map(|&j| model.joints()[j].name.as_str())
            .collect();
        s.push_str(&format!(
            "  {}: {}\n",
            links[model.end_effectors()[e]].name,
            path.join(" -> ")
        ));
    }
    s
}

pub fn run(path: &Path, as_json: bool) -> Result<()> {
    let src = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let model = parse_robot(&src).with_context(|| format!("parsing {}", path.display()))?;
    if as_json {
        println!("{}", serde_json::to_string_pretty(&summary(&model))?);
    } else {
        print!("{}", text(&model));
    }
    Ok(())
}
