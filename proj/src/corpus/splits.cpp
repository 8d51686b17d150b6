#include "kohscan/corpus/splits.hpp"

#include <cmath>
#include <map>

#include "kohscan/util/error.hpp"
#include "kohscan/util/rng.hpp"

namespace kohscan::corpus {

std::string to_string(Grouping g) { return g == Grouping::by_image ? "by_image" : "iid"; }

Grouping parse_grouping(const std::string& s) {
    if (s == "by_image" || s == "image") return Grouping::by_image;
    if (s == "iid" || s == "none") return Grouping::iid;
    throw PreconditionError("unknown grouping '" + s + "' (expected image or none)");
}

void SplitSpec::validate() const {
    if (!(test_fraction > 0.0) || !(val_fraction > 0.0)) throw PreconditionError("split fractions must be positive");
    if (!(test_fraction + val_fraction < 1.0)) throw PreconditionError("test_fraction + val_fraction must be < 1");
}

std::size_t split_target(double fraction, std::size_t total) {
    return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(total) + 1e-9));
}

namespace {

// Moving `size` more items into a split currently holding `have` brings it closer to `target`.
bool improves(std::size_t have, std::size_t size, std::size_t target) {
    if (have >= target) return false;
    const std::size_t deficit = target - have;
    const std::size_t after = have + size;
    const std::size_t miss = after >= target ? after - target : target - after;
    return miss < deficit;
}

}  // namespace

Manifest assign_splits(const Manifest& manifest, const SplitSpec& spec) {
    spec.validate();
    Manifest out = manifest;
    out.canonicalize();
    for (const auto& p : out.patches) {
        if (p.label == Label::unlabeled) throw PreconditionError("patch " + p.patch_id + " is unlabeled");
    }
    const std::size_t n = out.patches.size();
    const std::size_t n_test = split_target(spec.test_fraction, n);
    const std::size_t n_val = split_target(spec.val_fraction, n);
    Rng rng(spec.seed);

    if (spec.grouping == Grouping::iid) {
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        rng.shuffle(order);
        for (std::size_t k = 0; k < n; ++k) {
            auto& p = out.patches[order[k]];
            p.split = k < n_test ? Split::test : (k < n_test + n_val ? Split::val : Split::train);
        }
    } else {
        std::map<std::string, std::vector<std::size_t>> groups;
        for (std::size_t i = 0; i < n; ++i) groups[out.patches[i].image_id].push_back(i);
        std::vector<const std::vector<std::size_t>*> order;
        for (const auto& [id, members] : groups) order.push_back(&members);
        rng.shuffle(order);
        std::size_t have_test = 0;
        std::size_t have_val = 0;
        for (const auto* members : order) {
            Split s = Split::train;
            if (improves(have_test, members->size(), n_test)) {
                s = Split::test;
                have_test += members->size();
            } else if (improves(have_val, members->size(), n_val)) {
                s = Split::val;
                have_val += members->size();
            }
            for (std::size_t i : *members) out.patches[i].split = s;
        }
    }
    out.refresh_stats();
    return out;
}

}  // namespace kohscan::corpus
