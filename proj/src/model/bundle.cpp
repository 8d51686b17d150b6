#include "kohscan/model/bundle.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "kohscan/util/error.hpp"

namespace kohscan::model {
namespace {

constexpr char kMagic[8] = {'K', 'O', 'H', 'S', 'C', 'A', 'N', 'B'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }

    std::string_view take(std::size_t n) {
        need(n);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t position() const { return pos_; }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw IntegrityError("model bundle truncated");
    }

    std::string_view bytes_;
    std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::string_view bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    std::size_t off = 0;
    while (off < bytes.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
        crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + off), chunk);
        off += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

void put_tensor(std::string& out, const std::string& name, const nn::Tensor& t) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u64(out, d);
    for (double v : t.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

}  // namespace

nlohmann::json metadata(const ModelBundle& bundle) {
    nlohmann::json meta;
    meta["format_version"] = bundle.format_version;
    meta["spec"] = bundle.model.spec();
    meta["fingerprint"] = {{"seed", bundle.fingerprint.seed},
                           {"config_hash", bundle.fingerprint.config_hash},
                           {"epochs", bundle.fingerprint.epochs}};
    meta["parameter_count"] = parameter_count(bundle.model);
    meta["trainable_parameter_count"] = trainable_parameter_count(bundle.model);
    meta["weights_layout"] = "f64-le";
    if (bundle.checkpoint) meta["checkpoint"] = bundle.checkpoint->meta;
    return meta;
}

std::string serialize(const ModelBundle& bundle) {
    std::string out(kMagic, sizeof kMagic);
    put_u32(out, bundle.format_version);
    const std::string meta = metadata(bundle).dump();
    put_u64(out, meta.size());
    out += meta;

    const auto names = bundle.model.network().param_names();
    const auto params = bundle.model.network().all_params();
    const std::size_t extra = bundle.checkpoint ? bundle.checkpoint->tensors.size() : 0;
    put_u32(out, static_cast<std::uint32_t>(params.size() + extra));
    for (std::size_t i = 0; i < params.size(); ++i) put_tensor(out, names[i], params[i]->value);
    if (bundle.checkpoint) {
        for (const auto& [name, t] : bundle.checkpoint->tensors) put_tensor(out, "checkpoint:" + name, t);
    }
    put_u32(out, crc_of(out));
    return out;
}

ModelBundle deserialize(std::string_view bytes) {
    if (bytes.size() < sizeof kMagic + 4 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
        throw IntegrityError("not a model bundle (bad magic)");
    }
    Reader header(bytes.substr(sizeof kMagic));
    const std::uint32_t version = header.u32();
    if (version > kBundleFormatVersion) {
        throw VersionError("model bundle format_version " + std::to_string(version) +
                           " is newer than the supported version " + std::to_string(kBundleFormatVersion));
    }
    if (version < 1) throw VersionError("model bundle format_version 0 is not supported");
    if (bytes.size() < sizeof kMagic + 8) throw IntegrityError("model bundle truncated");
    const std::string_view body = bytes.substr(0, bytes.size() - 4);
    Reader tail(bytes.substr(bytes.size() - 4));
    if (tail.u32() != crc_of(body)) throw IntegrityError("model bundle checksum mismatch (file corrupted)");

    Reader r(body.substr(sizeof kMagic + 4));
    const std::uint64_t meta_len = r.u64();
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(r.take(meta_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model bundle metadata is not valid JSON: ") + e.what());
    }

    ArchitectureSpec spec;
    try {
        spec = meta.at("spec").get<ArchitectureSpec>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model bundle spec invalid: ") + e.what());
    }
    // Backbone weights are already in the archive; do not reload the source bundle.
    ArchitectureSpec build_spec = spec;
    build_spec.pretrained_backbone = false;
    nn::Network net = build_network(build_spec);
    Rng rng(0);
    net.initialize(rng);

    const auto names = net.param_names();
    auto params = net.all_params();
    const std::uint32_t count = r.u32();
    if (count < params.size()) throw IntegrityError("model bundle holds fewer tensors than the architecture needs");

    std::optional<CheckpointState> checkpoint;
    for (std::uint32_t t = 0; t < count; ++t) {
        const std::string name(r.take(r.u32()));
        const std::uint32_t rank = r.u32();
        nn::Shape shape(rank);
        for (auto& d : shape) d = r.u64();
        const std::size_t n = nn::element_count(shape);
        std::vector<double> values(n);
        for (auto& v : values) v = r.f64();
        if (t < params.size()) {
            if (name != names[t] || shape != params[t]->shape) {
                throw FormatError("model bundle tensor '" + name + "' does not match architecture tensor '" +
                                  names[t] + "' " + nn::to_string(params[t]->shape));
            }
            params[t]->value = nn::Tensor(std::move(shape), std::move(values));
        } else {
            constexpr std::string_view prefix = "checkpoint:";
            if (name.rfind(prefix, 0) != 0) throw FormatError("unexpected tensor '" + name + "' in model bundle");
            if (!checkpoint) checkpoint.emplace();
            checkpoint->tensors.emplace_back(name.substr(prefix.size()), nn::Tensor(std::move(shape), std::move(values)));
        }
    }
    if (r.position() != body.size() - sizeof kMagic - 4) throw IntegrityError("model bundle has trailing bytes");

    ModelBundle bundle(Model(spec, std::move(net)));
    bundle.format_version = version;
    const auto& fp = meta.at("fingerprint");
    bundle.fingerprint.seed = fp.value("seed", std::uint64_t{0});
    bundle.fingerprint.config_hash = fp.value("config_hash", std::string());
    bundle.fingerprint.epochs = fp.value("epochs", std::size_t{0});
    if (meta.contains("checkpoint")) {
        if (!checkpoint) checkpoint.emplace();
        checkpoint->meta = meta.at("checkpoint");
    }
    bundle.checkpoint = std::move(checkpoint);
    return bundle;
}

void save(const ModelBundle& bundle, const std::filesystem::path& path) {
    const std::string bytes = serialize(bundle);
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write model bundle: " + path.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("failed writing model bundle: " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

ModelBundle load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open model bundle: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

}  // namespace kohscan::model
