//! Operational baseline: visit waypoints, sweep positively labeled sketches,
//! then sweep whatever is left of the grid.

use crate::geogrid::{Cell, GridSpec};
use crate::pomdp::{Action, SearchModel};
use crate::sketch::Sketch;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Waypoints,
    Sketches,
    Exhaustive,
}

/// Cells to move through in order, starting next to `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRoute {
    pub start: usize,
    pub cells: Vec<usize>,
    pub phases: Vec<Phase>,
}

impl BaselineRoute {
    pub fn phase_cells(&self, phase: Phase) -> impl Iterator<Item = usize> + '_ {
        self.cells.iter().zip(&self.phases).filter(move |(_, &p)| p == phase).map(|(&c, _)| c)
    }
}

/// Manhattan path from `from` (exclusive) to `to` (inclusive), rows first.
pub fn manhattan_path(grid: &GridSpec, from: usize, to: usize) -> Vec<usize> {
    let (a, b) = (grid.cell(from), grid.cell(to));
    let mut path = Vec::with_capacity(a.manhattan(b));
    let (mut r, mut c) = (a.row, a.col);
    while r != b.row {
        r = if b.row > r { r + 1 } else { r - 1 };
        path.push(grid.index(Cell::new(r, c)));
    }
    while c != b.col {
        c = if b.col > c { c + 1 } else { c - 1 };
        path.push(grid.index(Cell::new(r, c)));
    }
    path
}

/// First move along [`manhattan_path`].
pub fn step_toward(grid: &GridSpec, from: usize, to: usize) -> Action {
    let (a, b) = (grid.cell(from), grid.cell(to));
    if b.row > a.row {
        Action::Up
    } else if b.row < a.row {
        Action::Down
    } else if b.col > a.col {
        Action::Right
    } else if b.col < a.col {
        Action::Left
    } else {
        Action::Stay
    }
}

/// Boustrophedon order over `cells`, choosing the corner closest to `from`.
fn lawnmower(grid: &GridSpec, cells: &[usize], from: usize) -> Vec<usize> {
    if cells.is_empty() {
        return Vec::new();
    }
    let mut rows: Vec<usize> = cells.iter().map(|&c| grid.cell(c).row).collect();
    rows.sort_unstable();
    rows.dedup();
    let here = grid.cell(from);
    let mut best: Option<(usize, Vec<usize>)> = None;
    for ascending in [true, false] {
        for first_left in [true, false] {
            let mut order = Vec::with_capacity(cells.len());
            let row_seq: Vec<usize> = if ascending { rows.clone() } else { rows.iter().rev().copied().collect() };
            for (k, &row) in row_seq.iter().enumerate() {
                let mut in_row: Vec<usize> = cells.iter().copied().filter(|&c| grid.cell(c).row == row).collect();
                in_row.sort_unstable();
                if (k % 2 == 0) != first_left {
                    in_row.reverse();
                }
                order.extend(in_row);
            }
            let d = grid.cell(order[0]).manhattan(here);
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, order));
            }
        }
    }
    best.map(|(_, o)| o).unwrap_or_default()
}

struct Builder<'a> {
    grid: &'a GridSpec,
    route: BaselineRoute,
    here: usize,
    covered: HashSet<usize>,
}

impl Builder<'_> {
    fn go(&mut self, to: usize, phase: Phase) {
        for c in manhattan_path(self.grid, self.here, to) {
            self.route.cells.push(c);
            self.route.phases.push(phase);
            self.covered.insert(c);
        }
        self.here = to;
    }
}

/// Builds the full baseline route. `positive_sketches` are the sketches that
/// carry an Inside or Near observation, in input order.
pub fn plan_baseline(grid: &GridSpec, start: usize, visit: &[usize], positive_sketches: &[&Sketch]) -> BaselineRoute {
    let mut b = Builder {
        grid,
        route: BaselineRoute {
            start,
            cells: Vec::new(),
            phases: Vec::new(),
        },
        here: start,
        covered: HashSet::from([start]),
    };
    let mut pending: Vec<usize> = visit.to_vec();
    while !pending.is_empty() {
        let here = grid.cell(b.here);
        let (k, _) = pending
            .iter()
            .enumerate()
            .min_by_key(|(i, &c)| (grid.cell(c).manhattan(here), *i))
            .expect("non-empty");
        let next = pending.remove(k);
        b.go(next, Phase::Waypoints);
    }
    for sketch in positive_sketches {
        let inside: Vec<usize> = grid
            .cells()
            .filter(|&c| sketch.contains(grid.center(c)))
            .map(|c| grid.index(c))
            .collect();
        for c in lawnmower(grid, &inside, b.here) {
            b.go(c, Phase::Sketches);
        }
    }
    let all: Vec<usize> = (0..grid.n_cells()).collect();
    for c in lawnmower(grid, &all, b.here) {
        if !b.covered.contains(&c) {
            b.go(c, Phase::Exhaustive);
        }
    }
    b.route
}

/// Executes a route one step at a time, detouring to confirm positive detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineAgent {
    route: BaselineRoute,
    next: usize,
    detour: Option<usize>,
}

impl BaselineAgent {
    pub fn new(route: BaselineRoute) -> Self {
        Self {
            route,
            next: 0,
            detour: None,
        }
    }

    pub fn route(&self) -> &BaselineRoute {
        &self.route
    }

    /// Records an observation made at `robot`; a positive code schedules a detour.
    pub fn observe(&mut self, model: &SearchModel, robot: usize, code: usize) {
        if let Some(cell) = model.cell_of_code(robot, code) {
            if cell != robot {
                self.detour = Some(cell);
            }
        }
    }

    pub fn act(&mut self, grid: &GridSpec, robot: usize) -> Action {
        if self.detour == Some(robot) {
            self.detour = None;
        }
        if let Some(d) = self.detour {
            return step_toward(grid, robot, d);
        }
        while self.next < self.route.cells.len() && self.route.cells[self.next] == robot {
            self.next += 1;
        }
        match self.route.cells.get(self.next) {
            Some(&c) => step_toward(grid, robot, c),
            None => Action::Stay,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;
    use crate::sketch::normalize_sketch;

    fn grid(rows: usize, cols: usize) -> GridSpec {
        GridSpec::new(rows, cols, 1.0, Vec2::default()).unwrap()
    }

    fn assert_adjacent(g: &GridSpec, route: &BaselineRoute) {
        let mut prev = route.start;
        for &c in &route.cells {
            assert!(g.cell(prev).manhattan(g.cell(c)) <= 1, "{prev} -> {c}");
            prev = c;
        }
    }

    #[test]
    fn nearer_waypoint_first() {
        let g = grid(10, 10);
        let start = g.index(Cell::new(0, 0));
        let far = g.index(Cell::new(9, 9));
        let near = g.index(Cell::new(2, 1));
        let route = plan_baseline(&g, start, &[far, near], &[]);
        let wp: Vec<usize> = route.phase_cells(Phase::Waypoints).collect();
        let pos_near = wp.iter().position(|&c| c == near).unwrap();
        let pos_far = wp.iter().position(|&c| c == far).unwrap();
        assert!(pos_near < pos_far);
        assert_adjacent(&g, &route);
    }

    #[test]
    fn rectangular_sketch_swept_once_each() {
        let g = grid(10, 10);
        // cells with rows 2..=4, cols 3..=6: 12 cells
        let sketch = normalize_sketch(
            "box",
            &[Vec2::new(3.0, 2.0), Vec2::new(7.0, 2.0), Vec2::new(7.0, 5.0), Vec2::new(3.0, 5.0)],
        )
        .unwrap();
        let start = g.index(Cell::new(1, 2));
        let route = plan_baseline(&g, start, &[], &[&sketch]);
        let swept: Vec<usize> = route.phase_cells(Phase::Sketches).collect();
        let inside: HashSet<usize> = g.cells().filter(|&c| sketch.contains(g.center(c))).map(|c| g.index(c)).collect();
        assert_eq!(inside.len(), 12);
        for c in &inside {
            assert_eq!(swept.iter().filter(|&&s| s == *c).count(), 1);
        }
        assert_adjacent(&g, &route);
        let order: Vec<Phase> = route.phases.iter().copied().fold(Vec::new(), |mut v, p| {
            if v.last() != Some(&p) {
                v.push(p);
            }
            v
        });
        assert_eq!(order, vec![Phase::Sketches, Phase::Exhaustive]);
    }

    #[test]
    fn empty_inputs_cover_grid() {
        for (r, c, s) in [(5, 7, 0), (6, 6, 14), (1, 9, 4), (8, 3, 23)] {
            let g = grid(r, c);
            let route = plan_baseline(&g, s, &[], &[]);
            assert!(route.phases.iter().all(|&p| p == Phase::Exhaustive));
            let mut seen: HashSet<usize> = route.cells.iter().copied().collect();
            seen.insert(s);
            assert_eq!(seen.len(), r * c);
            assert_adjacent(&g, &route);
        }
    }

    #[test]
    fn paths_and_steps_agree() {
        let g = grid(6, 6);
        let path = manhattan_path(&g, 0, 35);
        assert_eq!(path.len(), 10);
        assert_eq!(step_toward(&g, 0, 35), Action::Up);
        assert_eq!(step_toward(&g, 5, 3), Action::Left);
        assert_eq!(step_toward(&g, 7, 7), Action::Stay);
    }
}
