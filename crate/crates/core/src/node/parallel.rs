use std::collections::{BTreeMap, BTreeSet};

use super::{apply_entry, reach, Applied, Node, NodeError, Step, StepError};
use crate::fco_log::LogEntry;
use crate::ids::{Position, ServiceId};
use crate::runtime::{EntryTrace, World};

/// How one batch was scheduled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelReport {
    pub batch: u64,
    /// Positions per lane, each ascending. Lanes touch disjoint services.
    pub lanes: Vec<Vec<Position>>,
    /// First position that had to be redone serially, if any.
    pub fallback_at: Option<Position>,
}

struct LaneResult {
    done: Vec<(Position, Step)>,
    failed: Option<(Position, StepError)>,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

impl Node {
    /// Hosted services an entry can touch: declared callees of its target
    /// (transitively) plus everything its archival trace shows it calling.
    fn touch_set(&self, entry: &LogEntry) -> BTreeSet<ServiceId> {
        let mut set = BTreeSet::new();
        if self.hosts(&entry.intent.target) {
            set = reach(self.deployed(), &entry.intent.target, &entry.intent.method);
        }
        if let Some(t) = self.remote.traces.get(&entry.position) {
            for r in &t.records {
                set.insert(r.target.clone());
                if self.hosts(&r.target) {
                    set.extend(reach(self.deployed(), &r.target, &r.method));
                }
            }
        }
        set.retain(|s| self.hosts(s));
        set
    }

    /// Applies the next unapplied batch (up to `through`), running entries
    /// with disjoint touch-sets concurrently. The result is identical to
    /// [`Node::run_until`]; if a lane hits something its touch-set did not
    /// predict, everything from that position on is redone serially.
    pub fn parallel_apply(&mut self, through: Position) -> Result<ParallelReport, NodeError> {
        let start = self.frontier.global + 1;
        let Some(batch) = self
            .batches
            .iter()
            .find(|b| !b.is_empty() && b.range.contains(&start))
            .cloned()
        else {
            return Ok(ParallelReport {
                batch: 0,
                lanes: Vec::new(),
                fallback_at: None,
            });
        };
        let end = (*batch.range.end()).min(through);
        if end < start {
            return Ok(ParallelReport {
                batch: batch.number,
                lanes: Vec::new(),
                fallback_at: None,
            });
        }
        let entries: Vec<LogEntry> = self.entries[(start - 1) as usize..end as usize].to_vec();

        // union entries whose touch-sets overlap
        let sets: Vec<BTreeSet<ServiceId>> = entries.iter().map(|e| self.touch_set(e)).collect();
        let mut parent: Vec<usize> = (0..entries.len()).collect();
        let mut owner: BTreeMap<&ServiceId, usize> = BTreeMap::new();
        for (i, set) in sets.iter().enumerate() {
            for s in set {
                match owner.get(s) {
                    Some(&j) => {
                        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                        parent[a.max(b)] = a.min(b);
                    }
                    None => {
                        owner.insert(s, i);
                    }
                }
            }
        }
        let mut lanes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..entries.len() {
            let root = find(&mut parent, i);
            lanes.entry(root).or_default().push(i);
        }
        let lanes: Vec<Vec<usize>> = lanes.into_values().collect();

        let archival = self.profile.archival;
        let remote_through = self.remote.through;
        let hosted = self.hosted.clone();
        let mut worlds: Vec<(World, BTreeSet<ServiceId>)> = lanes
            .iter()
            .map(|lane| {
                let services: BTreeSet<ServiceId> =
                    lane.iter().flat_map(|&i| sets[i].iter().cloned()).collect();
                let foreign = hosted.difference(&services).cloned().collect();
                (self.world.take(&services), foreign)
            })
            .collect();

        let remote = &self.remote.traces;
        let results: Vec<LaneResult> = std::thread::scope(|scope| {
            let handles: Vec<_> = lanes
                .iter()
                .zip(worlds.iter_mut())
                .map(|(lane, (world, foreign))| {
                    let entries = &entries;
                    let hosted = &hosted;
                    let foreign = &*foreign;
                    scope.spawn(move || {
                        let mut out = LaneResult {
                            done: Vec::new(),
                            failed: None,
                        };
                        for &i in lane {
                            let e = &entries[i];
                            let p = e.position;
                            let covered = archival || p <= remote_through;
                            match apply_entry(
                                world,
                                hosted,
                                e,
                                remote.get(&p),
                                covered,
                                Some(foreign),
                            ) {
                                Ok(step) => out.done.push((p, step)),
                                Err(err) => {
                                    out.failed = Some((p, err));
                                    break;
                                }
                            }
                        }
                        out
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("lane panicked"))
                .collect()
        });

        for (world, _) in worlds {
            self.world.merge(world);
        }

        let cut = results
            .iter()
            .filter_map(|r| r.failed.as_ref().map(|f| f.0))
            .min();
        let mut committed: Vec<(Position, Applied, Option<EntryTrace>)> = Vec::new();
        for r in results {
            // undo anything at or after the cut, newest first
            for (p, step) in r.done.iter().rev() {
                if cut.is_some_and(|c| *p >= c) {
                    self.world.rollback(&step.undo);
                }
            }
            for (p, step) in r.done {
                if cut.is_none_or(|c| p < c) {
                    committed.push((p, step.applied, step.trace));
                }
            }
        }
        committed.sort_by_key(|c| c.0);
        for (p, applied, trace) in committed {
            self.commit(p, applied, trace);
        }
        let report = ParallelReport {
            batch: batch.number,
            lanes: lanes
                .iter()
                .map(|l| l.iter().map(|&i| entries[i].position).collect())
                .collect(),
            fallback_at: cut,
        };
        self.parallel_reports.push(report.clone());
        if let Some(c) = cut {
            debug_assert_eq!(self.frontier.global, c - 1);
            self.run_until(end)?;
        }
        Ok(report)
    }
}
