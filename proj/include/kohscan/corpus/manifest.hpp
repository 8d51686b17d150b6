#pragma once

// Slide and patch provenance records and their line-delimited JSON file form.
//
// A manifest file holds one JSON object per line. Each object has a "kind"
// of "slide" or "patch"; the remaining keys are the field names of
// SlideImage / PatchRecord below. Slide paths are relative to the
// directory containing the manifest file (absolute paths are kept as is).

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace kohscan::corpus {

inline constexpr int kDefaultPatchSize = 500;

enum class SlideClass { fungus_positive, keratin_only, unlabeled };
enum class Label { fungus, keratin, unlabeled };
enum class Split { train, val, test, unassigned };

std::string to_string(SlideClass c);
std::string to_string(Label l);
std::string to_string(Split s);
SlideClass parse_slide_class(const std::string& s);
Label parse_label(const std::string& s);
Split parse_split(const std::string& s);

struct SlideImage {
    std::string image_id;
    std::string path;
    int width_px = 0;
    int height_px = 0;
    std::string case_id;
    SlideClass slide_class = SlideClass::unlabeled;

    bool operator==(const SlideImage&) const = default;
};

struct PatchRecord {
    std::string patch_id;
    std::string image_id;
    int x = 0;
    int y = 0;
    int size_px = kDefaultPatchSize;
    Label label = Label::unlabeled;
    Split split = Split::unassigned;
    double content_fraction = 1.0;

    bool operator==(const PatchRecord&) const = default;
};

struct ManifestStats {
    std::size_t slides = 0;
    std::size_t fungus = 0;
    std::size_t keratin = 0;
    std::size_t unlabeled = 0;
    std::size_t total = 0;
    std::size_t train = 0;
    std::size_t val = 0;
    std::size_t test = 0;
    std::size_t unassigned = 0;

    bool operator==(const ManifestStats&) const = default;
};

struct Manifest {
    std::vector<SlideImage> slides;
    std::vector<PatchRecord> patches;
    ManifestStats stats;
    /// Directory that relative slide paths resolve against. Not serialised.
    std::filesystem::path root;

    const SlideImage* find_slide(const std::string& image_id) const;
    std::filesystem::path resolve(const SlideImage& slide) const;

    /// Recomputes `stats` from the records.
    void refresh_stats();

    /// Checks cross-record invariants (unique ids, references, bounds);
    /// throws FormatError naming the offending record.
    void validate() const;

    /// Sorts slides by image_id and patches by patch_id.
    void canonicalize();

    std::vector<const PatchRecord*> patches_in(Split split) const;
};

ManifestStats compute_stats(const Manifest& manifest);

nlohmann::json to_json(const SlideImage& s);
nlohmann::json to_json(const PatchRecord& p);
nlohmann::json to_json(const ManifestStats& s);

/// Parses a manifest file. Malformed rows raise FormatError with the line
/// number; duplicate ids are fatal. Sets `root` to the file's directory.
Manifest read_manifest(const std::filesystem::path& path);

/// Parses manifest text; `origin` names the source in error messages.
Manifest parse_manifest(const std::string& text, const std::string& origin);

/// Writes records in canonical order, rewriting slide paths relative to the
/// output file's directory.
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

std::string format_manifest(const Manifest& manifest, const std::filesystem::path& output_dir);

/// Builds a validated manifest from an annotation file. Slide paths in the
/// annotations resolve against `image_dir`; missing width/height are read
/// from the image header. Throws on missing images, malformed rows,
/// duplicate ids and out-of-bounds patches.
Manifest ingest(const std::filesystem::path& image_dir, const std::filesystem::path& annotations);

/// Writes every labelled patch of the manifest as an 8-bit PNG into out_dir
/// (named <patch_id>.png). Returns the number written.
std::size_t export_patches(const Manifest& manifest, const std::filesystem::path& out_dir);

}  // namespace kohscan::corpus
