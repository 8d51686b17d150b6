#pragma once

#include <cstdint>
#include <string>

#include "kohscan/corpus/manifest.hpp"

namespace kohscan::corpus {

enum class Grouping { by_image, iid };

std::string to_string(Grouping g);
Grouping parse_grouping(const std::string& s);

struct SplitSpec {
    double test_fraction = 0.20;
    /// Fraction of the total patch count (not of the non-test remainder).
    double val_fraction = 0.15;
    std::uint64_t seed = 0;
    Grouping grouping = Grouping::by_image;

    void validate() const;
};

/// floor(fraction * total), robust to representation error in the product.
std::size_t split_target(double fraction, std::size_t total);

/// Assigns every patch to train/val/test. Patches are ordered by patch_id
/// before the seeded shuffle, so the result does not depend on input order.
///
/// iid: exactly split_target(test_fraction) test and split_target(val_fraction)
/// val patches, the remainder train. by_image: whole slides are dealt out in
/// shuffled order, each joining test (then val) when that brings the split
/// closer to its target; remaining slides go to train.
Manifest assign_splits(const Manifest& manifest, const SplitSpec& spec);

}  // namespace kohscan::corpus
