use std::path::Path;

use clap::ValueEnum;
use his_core::coopgame::{
    convexity_violation, core_violation, hybrid_allocation, is_efficient, shapley_values,
    Allocation, CharacteristicGame,
};

use crate::CliError;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GameAction {
    Shapley,
    Core,
    Convex,
    Hybrid,
}

/// Rounds away float noise below 1e-12 so symmetric games print cleanly.
fn fmt_num(x: f64) -> String {
    let r = (x * 1e12).round() / 1e12;
    if r == 0.0 {
        "0".into()
    } else {
        r.to_string()
    }
}

fn fmt_alloc(x: &Allocation) -> String {
    x.payoffs()
        .iter()
        .map(|&v| fmt_num(v))
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_allocation(s: &str, n: usize) -> Result<Allocation, CliError> {
    let v = s
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| CliError::Usage(format!("allocation entry {t:?}: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if v.len() != n {
        return Err(CliError::Usage(format!(
            "allocation has {} payoffs, game has {n} agents",
            v.len()
        )));
    }
    Ok(Allocation(v))
}

pub fn load_game(path: &Path) -> Result<CharacteristicGame, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    CharacteristicGame::from_json_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn report(
    action: GameAction,
    game: &CharacteristicGame,
    allocation: Option<&str>,
) -> Result<String, CliError> {
    let runtime = |e: his_core::coopgame::GameError| CliError::Runtime(e.to_string());
    let mut out = String::new();
    match action {
        GameAction::Shapley => out.push_str(&fmt_alloc(&shapley_values(game))),
        GameAction::Hybrid => {
            let x = hybrid_allocation(game);
            out.push_str(&fmt_alloc(&x));
            out.push_str(&format!(
                "\nefficient={}",
                is_efficient(game, &x).map_err(runtime)?
            ));
            out.push_str(&format!(
                "\ncore={}",
                core_violation(game, &x).map_err(runtime)?.is_none()
            ));
        }
        GameAction::Core => {
            let x = match allocation {
                Some(s) => parse_allocation(s, game.n())?,
                None => shapley_values(game),
            };
            match core_violation(game, &x).map_err(runtime)? {
                None => out.push_str("true"),
                Some(c) => out.push_str(&format!(
                    "false\nviolated coalition {c}: x(C) = {} < v(C) = {}",
                    fmt_num(x.coalition_sum(c)),
                    fmt_num(game.value(c))
                )),
            }
        }
        GameAction::Convex => match convexity_violation(game).map_err(runtime)? {
            None => out.push_str("true"),
            Some((c, d)) => out.push_str(&format!(
                "false\nviolating pair C = {c}, D = {d}: v(C∪D) + v(C∩D) = {} < v(C) + v(D) = {}",
                fmt_num(game.value(c.union(d)) + game.value(c.intersection(d))),
                fmt_num(game.value(c) + game.value(d))
            )),
        },
    }
    Ok(out)
}

pub fn game(action: GameAction, path: &Path, allocation: Option<&str>) -> Result<(), CliError> {
    let g = load_game(path)?;
    crate::emit(&report(action, &g, allocation)?);
    Ok(())
}
