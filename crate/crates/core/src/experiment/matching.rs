use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::persistence::ParticipantProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeBand {
    pub min: u32,
    pub max: u32,
    pub count: usize,
}

impl AgeBand {
    pub fn contains(&self, age: u32) -> bool {
        (self.min..=self.max).contains(&age)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionConstraints {
    pub team_size: usize,
    /// Required head count per gender label (compared case-insensitively).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender_targets: Option<BTreeMap<String, usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_bands: Option<Vec<AgeBand>>,
}

impl Default for CompositionConstraints {
    fn default() -> Self {
        Self {
            team_size: 1,
            gender_targets: None,
            age_bands: None,
        }
    }
}

fn gender_key(p: &ParticipantProfile) -> Option<String> {
    p.demographics
        .gender
        .as_deref()
        .map(|g| g.trim().to_lowercase())
        .filter(|g| !g.is_empty())
}

impl CompositionConstraints {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.team_size == 0 {
            errs.push("composition.team_size must be at least 1".into());
        }
        if let Some(targets) = &self.gender_targets {
            let sum: usize = targets.values().sum();
            if sum != self.team_size {
                errs.push(format!(
                    "composition.gender_targets sum to {sum}, team_size is {}",
                    self.team_size
                ));
            }
            let mut keys: Vec<String> = targets.keys().map(|k| k.trim().to_lowercase()).collect();
            keys.sort();
            if keys.windows(2).any(|w| w[0] == w[1]) || keys.iter().any(String::is_empty) {
                errs.push("composition.gender_targets has blank or duplicate labels".into());
            }
        }
        if let Some(bands) = &self.age_bands {
            let sum: usize = bands.iter().map(|b| b.count).sum();
            if sum != self.team_size {
                errs.push(format!(
                    "composition.age_bands counts sum to {sum}, team_size is {}",
                    self.team_size
                ));
            }
            if bands.iter().any(|b| b.min > b.max) {
                errs.push("composition.age_bands has a band with min > max".into());
            }
        }
        errs
    }

    fn gender_target(&self, gender: &str) -> Option<usize> {
        self.gender_targets
            .as_ref()?
            .iter()
            .find(|(k, _)| k.trim().to_lowercase() == gender)
            .map(|(_, v)| *v)
    }

    /// Checks that `team` meets the size and every target exactly.
    pub fn check_team(&self, team: &[ParticipantProfile]) -> Result<(), String> {
        if team.len() != self.team_size {
            return Err(format!("team has {} members, expected {}", team.len(), self.team_size));
        }
        if !self.gender_ok(team) {
            return Err("team does not meet the gender targets".into());
        }
        if !self.ages_assignable(team) {
            return Err("team does not meet the age bands".into());
        }
        Ok(())
    }

    fn gender_ok(&self, team: &[ParticipantProfile]) -> bool {
        let Some(targets) = &self.gender_targets else {
            return true;
        };
        targets.iter().all(|(g, n)| {
            let g = g.trim().to_lowercase();
            team.iter()
                .filter(|p| gender_key(p).as_deref() == Some(g.as_str()))
                .count()
                == *n
        })
    }

    fn ages_assignable(&self, team: &[ParticipantProfile]) -> bool {
        let Some(bands) = &self.age_bands else {
            return true;
        };
        fn go(ages: &[u32], bands: &[AgeBand], left: &mut Vec<usize>) -> bool {
            let Some((&age, rest)) = ages.split_first() else {
                return true;
            };
            for (i, b) in bands.iter().enumerate() {
                if left[i] > 0 && b.contains(age) {
                    left[i] -= 1;
                    if go(rest, bands, left) {
                        return true;
                    }
                    left[i] += 1;
                }
            }
            false
        }
        let Some(ages) = team.iter().map(|p| p.demographics.age).collect::<Option<Vec<u32>>>() else {
            return false;
        };
        go(&ages, bands, &mut bands.iter().map(|b| b.count).collect())
    }
}

#[derive(Debug, Default, Clone)]
struct OpenTeam {
    members: Vec<usize>,
    genders: BTreeMap<String, usize>,
    bands: BTreeMap<usize, usize>,
}

impl OpenTeam {
    /// Admits `p` if a slot is free and every target still has room.
    /// Age goes to the first band containing it that has room.
    fn admit(&mut self, p: &ParticipantProfile, c: &CompositionConstraints) -> bool {
        if self.members.len() >= c.team_size {
            return false;
        }
        let gender = if c.gender_targets.is_some() {
            let Some(g) = gender_key(p) else { return false };
            let target = c.gender_target(&g).unwrap_or(0);
            if self.genders.get(&g).copied().unwrap_or(0) >= target {
                return false;
            }
            Some(g)
        } else {
            None
        };
        let band = match &c.age_bands {
            Some(bands) => {
                let Some(age) = p.demographics.age else { return false };
                let free = bands
                    .iter()
                    .enumerate()
                    .find(|(i, b)| b.contains(age) && self.bands.get(i).copied().unwrap_or(0) < b.count);
                match free {
                    Some((i, _)) => Some(i),
                    None => return false,
                }
            }
            None => None,
        };
        if let Some(g) = gender {
            *self.genders.entry(g).or_default() += 1;
        }
        if let Some(i) = band {
            *self.bands.entry(i).or_default() += 1;
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub participant_id: String,
    pub profile: ParticipantProfile,
    pub enqueued_at: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub teams: Vec<Vec<PoolEntry>>,
    pub residual: Vec<PoolEntry>,
}

/// Greedy first-fit in pool order: each participant joins the first open
/// team that still admits them, or starts a new one. A team forms when it
/// reaches `team_size`, at which point every target is met exactly.
/// Members of unfinished teams and unplaceable participants are returned
/// in pool order.
pub fn match_teams(pool: &[PoolEntry], c: &CompositionConstraints) -> MatchOutcome {
    let mut open: Vec<OpenTeam> = Vec::new();
    let mut formed: Vec<Vec<usize>> = Vec::new();
    let mut placed = vec![false; pool.len()];
    if c.team_size == 0 {
        return MatchOutcome {
            teams: Vec::new(),
            residual: pool.to_vec(),
        };
    }
    for (i, entry) in pool.iter().enumerate() {
        let slot = match open.iter_mut().position(|t| t.admit(&entry.profile, c)) {
            Some(pos) => pos,
            None => {
                let mut fresh = OpenTeam::default();
                if !fresh.admit(&entry.profile, c) {
                    continue;
                }
                open.push(fresh);
                open.len() - 1
            }
        };
        open[slot].members.push(i);
        placed[i] = true;
        if open[slot].members.len() == c.team_size {
            formed.push(open.remove(slot).members);
        }
    }
    for t in &open {
        for &i in &t.members {
            placed[i] = false;
        }
    }
    MatchOutcome {
        teams: formed
            .into_iter()
            .map(|members| members.into_iter().map(|i| pool[i].clone()).collect())
            .collect(),
        residual: pool
            .iter()
            .zip(&placed)
            .filter(|(_, p)| !**p)
            .map(|(e, _)| e.clone())
            .collect(),
    }
}
