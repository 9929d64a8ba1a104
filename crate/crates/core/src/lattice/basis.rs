use serde::{Deserialize, Serialize};

/// Basis an operator is expressed in.
///
/// `Fock` is the qudit product basis with index `Σ n_ℓ d^{L-1-ℓ}`, so site 0 is
/// the most significant digit. `LeakageParticle` is the single-particle basis
/// of the effective propagation model, where basis state `ℓ` means one leakage
/// excitation (a `|2⟩`) sitting on site `ℓ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Basis {
    Fock { sites: usize, local_dim: usize },
    LeakageParticle { sites: usize },
}

impl Basis {
    pub fn sites(&self) -> usize {
        match *self {
            Basis::Fock { sites, .. } | Basis::LeakageParticle { sites } => sites,
        }
    }

    pub fn dimension(&self) -> usize {
        match *self {
            Basis::Fock { sites, local_dim } => local_dim.pow(sites as u32),
            Basis::LeakageParticle { sites } => sites,
        }
    }

    /// Physical excitation number on `site` for every basis state. In the
    /// leakage-particle basis one particle carries two excitations.
    pub fn excitation_number(&self, site: usize) -> Vec<f64> {
        match *self {
            Basis::Fock { sites, local_dim } => {
                let fock = FockBasis::new(sites, local_dim);
                (0..fock.dimension())
                    .map(|i| fock.occupation(i, site) as f64)
                    .collect()
            }
            Basis::LeakageParticle { sites } => {
                (0..sites).map(|i| if i == site { 2.0 } else { 0.0 }).collect()
            }
        }
    }
}

/// Index arithmetic on the qudit product basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FockBasis {
    sites: usize,
    local_dim: usize,
    dimension: usize,
}

impl FockBasis {
    pub fn new(sites: usize, local_dim: usize) -> Self {
        FockBasis {
            sites,
            local_dim,
            dimension: local_dim.pow(sites as u32),
        }
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn local_dim(&self) -> usize {
        self.local_dim
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Place value of `site` in the basis index.
    pub fn stride(&self, site: usize) -> usize {
        self.local_dim.pow((self.sites - 1 - site) as u32)
    }

    /// Occupation of `site` in basis state `index`.
    pub fn occupation(&self, index: usize, site: usize) -> usize {
        (index / self.stride(site)) % self.local_dim
    }

    /// All occupations of basis state `index`.
    pub fn occupations(&self, index: usize) -> Vec<usize> {
        (0..self.sites).map(|s| self.occupation(index, s)).collect()
    }

    /// Basis index of an occupation pattern.
    pub fn index_of(&self, occupations: &[usize]) -> usize {
        occupations
            .iter()
            .fold(0, |acc, &n| acc * self.local_dim + n)
    }

    /// Total excitation number of basis state `index`.
    pub fn total_number(&self, index: usize) -> usize {
        let mut i = index;
        let mut total = 0;
        for _ in 0..self.sites {
            total += i % self.local_dim;
            i /= self.local_dim;
        }
        total
    }

    /// Basis indices grouped by total excitation number, ascending.
    pub fn number_sectors(&self) -> Vec<Vec<usize>> {
        let max = self.sites * (self.local_dim - 1);
        let mut sectors = vec![Vec::new(); max + 1];
        for i in 0..self.dimension {
            sectors[self.total_number(i)].push(i);
        }
        sectors
    }
}
