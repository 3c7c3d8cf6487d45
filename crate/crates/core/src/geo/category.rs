use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::GeoError;

/// Number of POI categories in the shared semantic vocabulary.
pub const NUM_POI_CATEGORIES: usize = 14;

/// POI category. The discriminant is the category index used by every 14-dim vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PoiCategory {
    TransportationFacilities = 0,
    CompaniesEnterprises = 1,
    CommercialResidential = 2,
    Automotive = 3,
    ScienceEducationCulture = 4,
    SportsFitness = 5,
    FinancialInstitutions = 6,
    LeisureEntertainment = 7,
    Healthcare = 8,
    TouristAttractions = 9,
    LifeServices = 10,
    ShoppingConsumerGoods = 11,
    HotelsAccommodations = 12,
    DiningCuisine = 13,
}

impl PoiCategory {
    pub const ALL: [PoiCategory; NUM_POI_CATEGORIES] = [
        PoiCategory::TransportationFacilities,
        PoiCategory::CompaniesEnterprises,
        PoiCategory::CommercialResidential,
        PoiCategory::Automotive,
        PoiCategory::ScienceEducationCulture,
        PoiCategory::SportsFitness,
        PoiCategory::FinancialInstitutions,
        PoiCategory::LeisureEntertainment,
        PoiCategory::Healthcare,
        PoiCategory::TouristAttractions,
        PoiCategory::LifeServices,
        PoiCategory::ShoppingConsumerGoods,
        PoiCategory::HotelsAccommodations,
        PoiCategory::DiningCuisine,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            PoiCategory::TransportationFacilities => "Transportation Facilities",
            PoiCategory::CompaniesEnterprises => "Companies & Enterprises",
            PoiCategory::CommercialResidential => "Commercial & Residential",
            PoiCategory::Automotive => "Automotive",
            PoiCategory::ScienceEducationCulture => "Science & Education & Culture",
            PoiCategory::SportsFitness => "Sports & Fitness",
            PoiCategory::FinancialInstitutions => "Financial Institutions",
            PoiCategory::LeisureEntertainment => "Leisure & Entertainment",
            PoiCategory::Healthcare => "Healthcare",
            PoiCategory::TouristAttractions => "Tourist Attractions",
            PoiCategory::LifeServices => "Life Services",
            PoiCategory::ShoppingConsumerGoods => "Shopping & Consumer Goods",
            PoiCategory::HotelsAccommodations => "Hotels & Accommodations",
            PoiCategory::DiningCuisine => "Dining & Cuisine",
        }
    }
}

impl fmt::Display for PoiCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PoiCategory {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.label() == s)
            .ok_or_else(|| GeoError::UnknownCategory(s.to_string()))
    }
}

impl Serialize for PoiCategory {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for PoiCategory {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let label = String::deserialize(d)?;
        label.parse().map_err(serde::de::Error::custom)
    }
}

/// Tolerance on the simplex sum of a [`PoiDistribution`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A probability vector over the 14 POI categories.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoiDistribution([f64; NUM_POI_CATEGORIES]);

impl PoiDistribution {
    /// Validates non-negativity and the unit sum.
    pub fn new(weights: [f64; NUM_POI_CATEGORIES]) -> Result<Self, GeoError> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(GeoError::InvalidDistribution(format!(
                "negative or non-finite weight in {weights:?}"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(GeoError::InvalidDistribution(format!("weights sum to {sum}")));
        }
        Ok(Self(weights))
    }

    /// Normalizes arbitrary non-negative weights. All-zero input yields the uniform vector.
    pub fn normalized(weights: &[f64]) -> Result<Self, GeoError> {
        if weights.len() != NUM_POI_CATEGORIES {
            return Err(GeoError::InvalidDistribution(format!(
                "expected {NUM_POI_CATEGORIES} weights, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(GeoError::InvalidDistribution(format!(
                "negative or non-finite weight in {weights:?}"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if sum == 0.0 {
            return Ok(Self::uniform());
        }
        let mut out = [0.0; NUM_POI_CATEGORIES];
        for (o, w) in out.iter_mut().zip(weights) {
            *o = w / sum;
        }
        Ok(Self(out))
    }

    pub fn uniform() -> Self {
        Self([1.0 / NUM_POI_CATEGORIES as f64; NUM_POI_CATEGORIES])
    }

    pub fn one_hot(category: PoiCategory) -> Self {
        let mut w = [0.0; NUM_POI_CATEGORIES];
        w[category.index()] = 1.0;
        Self(w)
    }

    pub fn from_counts(counts: &[usize; NUM_POI_CATEGORIES]) -> Self {
        let w: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        Self::normalized(&w).expect("counts are finite and non-negative")
    }

    pub fn weights(&self) -> &[f64; NUM_POI_CATEGORIES] {
        &self.0
    }

    pub fn weight(&self, category: PoiCategory) -> f64 {
        self.0[category.index()]
    }

    /// Most likely category; ties go to the lowest index.
    pub fn dominant(&self) -> PoiCategory {
        let mut best = 0;
        for i in 1..NUM_POI_CATEGORIES {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        PoiCategory::ALL[best]
    }

    pub fn as_f32(&self) -> [f32; NUM_POI_CATEGORIES] {
        self.0.map(|w| w as f32)
    }
}

impl Default for PoiDistribution {
    fn default() -> Self {
        Self::uniform()
    }
}

impl Serialize for PoiDistribution {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for PoiDistribution {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = <[f64; NUM_POI_CATEGORIES]>::deserialize(d)?;
        Self::new(w).map_err(serde::de::Error::custom)
    }
}
