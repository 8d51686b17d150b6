#include "kohscan/corpus/dataset.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <map>
#include <mutex>
#include <thread>

#include "kohscan/corpus/preprocess.hpp"
#include "kohscan/image/image.hpp"
#include "kohscan/util/error.hpp"

namespace kohscan::corpus {

int label_value(Label label) {
    switch (label) {
        case Label::fungus: return 1;
        case Label::keratin: return 0;
        case Label::unlabeled: return -1;
    }
    return -1;
}

PatchSet load_patches(const Manifest& manifest, std::span<const PatchRecord* const> patches, int out_h, int out_w,
                      int workers) {
    PatchSet set;
    set.height = out_h;
    set.width = out_w;
    set.planes.resize(patches.size());
    set.labels.resize(patches.size());
    set.patch_ids.resize(patches.size());

    std::map<std::string, std::vector<std::size_t>> by_slide;
    for (std::size_t i = 0; i < patches.size(); ++i) {
        set.labels[i] = label_value(patches[i]->label);
        set.patch_ids[i] = patches[i]->patch_id;
        by_slide[patches[i]->image_id].push_back(i);
    }

    std::vector<std::pair<std::filesystem::path, const std::vector<std::size_t>*>> jobs;
    std::vector<std::string> missing;
    for (const auto& [image_id, members] : by_slide) {
        const SlideImage* slide = manifest.find_slide(image_id);
        if (!slide) throw FormatError("patch references unknown image_id " + image_id);
        auto path = manifest.resolve(*slide);
        if (!std::filesystem::is_regular_file(path)) {
            missing.push_back(path.string());
            continue;
        }
        jobs.emplace_back(std::move(path), &members);
    }
    if (!missing.empty()) {
        std::string msg = "missing patch source files:";
        for (const auto& m : missing) msg += "\n  " + m;
        throw FormatError(msg);
    }

    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto run = [&] {
        for (;;) {
            const std::size_t j = next.fetch_add(1);
            if (j >= jobs.size()) return;
            try {
                image::Image slide = image::read(jobs[j].first);
                if (slide.channels != 1) slide = image::to_gray(slide);
                for (std::size_t i : *jobs[j].second) {
                    const PatchRecord& p = *patches[i];
                    if (p.x < 0 || p.y < 0 || p.x + p.size_px > slide.width || p.y + p.size_px > slide.height) {
                        throw FormatError("patch " + p.patch_id + " lies outside " + jobs[j].first.string());
                    }
                    set.planes[i] = preprocess_plane(image::crop(slide, p.x, p.y, p.size_px, p.size_px), out_h, out_w);
                }
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next.store(jobs.size());
                return;
            }
        }
    };
    const int n_threads = std::max(1, std::min<int>(workers, static_cast<int>(jobs.size())));
    if (n_threads == 1) {
        run();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(run);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);
    return set;
}

nn::Tensor make_batch(const PatchSet& set, std::span<const std::size_t> indices, std::size_t channels,
                      std::span<const Flip> flips) {
    if (!flips.empty() && flips.size() != indices.size()) throw PreconditionError("make_batch: flips size mismatch");
    const auto h = static_cast<std::size_t>(set.height);
    const auto w = static_cast<std::size_t>(set.width);
    nn::Tensor batch({indices.size(), h, w, channels});
    std::vector<float> flipped;
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const auto& plane = set.planes.at(indices[b]);
        if (flips.empty() || (!flips[b].horizontal && !flips[b].vertical)) {
            fill_sample(plane, batch, b);
            continue;
        }
        flipped.resize(plane.size());
        for (std::size_t y = 0; y < h; ++y) {
            const std::size_t sy = flips[b].vertical ? h - 1 - y : y;
            for (std::size_t x = 0; x < w; ++x) {
                const std::size_t sx = flips[b].horizontal ? w - 1 - x : x;
                flipped[y * w + x] = plane[sy * w + sx];
            }
        }
        fill_sample(flipped, batch, b);
    }
    return batch;
}

}  // namespace kohscan::corpus
