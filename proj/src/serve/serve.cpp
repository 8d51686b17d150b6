#include "kohscan/serve/serve.hpp"

#include <filesystem>

#include <httplib.h>

#include "kohscan/image/image.hpp"
#include "kohscan/util/error.hpp"
#include "kohscan/util/log.hpp"

namespace kohscan::serve {

using nlohmann::json;

namespace {

struct HttpError {
    int status;
    std::string reason;
};

void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

// Image bytes from the multipart field "image" or, failing that, the raw body.
std::string image_bytes(const httplib::Request& req, std::string* filename) {
    if (req.is_multipart_form_data()) {
        if (!req.has_file("image")) throw HttpError{400, "multipart request lacks an \"image\" field"};
        const auto f = req.get_file_value("image");
        if (filename) *filename = f.filename;
        if (f.content.empty()) throw HttpError{400, "empty image field"};
        return f.content;
    }
    if (req.body.empty()) throw HttpError{400, "empty request body"};
    return req.body;
}

image::Image decode(const std::string& bytes) {
    try {
        return image::decode(bytes);
    } catch (const Error& e) {
        throw HttpError{400, std::string("undecodable image: ") + e.what()};
    }
}

double number(const json& v, const std::string& key) {
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) {
        try {
            std::size_t used = 0;
            const double d = std::stod(v.get<std::string>(), &used);
            if (used == v.get<std::string>().size()) return d;
        } catch (const std::exception&) {
        }
    }
    throw HttpError{400, "parameter " + key + " is not a number"};
}

int integer(const json& v, const std::string& key) {
    const double d = number(v, key);
    if (d != static_cast<double>(static_cast<int>(d))) throw HttpError{400, "parameter " + key + " is not an integer"};
    return static_cast<int>(d);
}

bool boolean(const json& v, const std::string& key) {
    if (v.is_boolean()) return v.get<bool>();
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw HttpError{400, "parameter " + key + " is not a boolean"};
}

// Query parameters and the optional multipart "params" JSON object, merged
// (the JSON object wins).
json request_params(const httplib::Request& req) {
    json out = json::object();
    for (const auto& [k, v] : req.params) out[k] = v;
    if (req.is_multipart_form_data() && req.has_file("params")) {
        json p;
        try {
            p = json::parse(req.get_file_value("params").content);
        } catch (const json::exception& e) {
            throw HttpError{400, std::string("params is not valid JSON: ") + e.what()};
        }
        if (!p.is_object()) throw HttpError{400, "params must be a JSON object"};
        for (auto& [k, v] : p.items()) out[k] = v;
    }
    return out;
}

struct ScanRequest {
    scan::ScanParams params;
    std::string image_id;
    bool overlay = false;
};

ScanRequest scan_request(const json& p, const scan::ScanParams& defaults) {
    ScanRequest r;
    r.params = defaults;
    for (const auto& [key, v] : p.items()) {
        if (key == "size_px") r.params.size_px = integer(v, key);
        else if (key == "stride_px") r.params.stride_px = integer(v, key);
        else if (key == "min_content") r.params.min_content = number(v, key);
        else if (key == "threshold") r.params.threshold = number(v, key);
        else if (key == "min_positive_patches") r.params.min_positive_patches = integer(v, key);
        else if (key == "image_id") r.image_id = v.is_string() ? v.get<std::string>() : v.dump();
        else if (key == "overlay") r.overlay = boolean(v, key);
        else throw HttpError{400, "unknown parameter " + key};
    }
    try {
        r.params.validate();
    } catch (const PreconditionError& e) {
        throw HttpError{400, e.what()};
    }
    return r;
}

}  // namespace

// Holds one inference slot for its lifetime.
class Service::Slot {
public:
    explicit Slot(Service& s) : s_(s) {
        std::unique_lock lock(s_.mutex_);
        if (s_.busy_ >= s_.config_.inference_workers && s_.waiting_ >= s_.config_.queue_capacity) {
            throw HttpError{503, "inference queue is full"};
        }
        ++s_.waiting_;
        s_.cv_.wait(lock, [&] { return s_.busy_ < s_.config_.inference_workers; });
        --s_.waiting_;
        ++s_.busy_;
    }
    ~Slot() {
        {
            std::lock_guard lock(s_.mutex_);
            --s_.busy_;
        }
        s_.cv_.notify_one();
    }
    Slot(const Slot&) = delete;
    Slot& operator=(const Slot&) = delete;

private:
    Service& s_;
};

std::string base64_encode(std::string_view bytes) {
    static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < bytes.size(); i += 3) {
        const std::uint32_t v = (static_cast<std::uint8_t>(bytes[i]) << 16) |
                                (static_cast<std::uint8_t>(bytes[i + 1]) << 8) | static_cast<std::uint8_t>(bytes[i + 2]);
        out += kAlphabet[(v >> 18) & 63];
        out += kAlphabet[(v >> 12) & 63];
        out += kAlphabet[(v >> 6) & 63];
        out += kAlphabet[v & 63];
    }
    if (i + 1 == bytes.size()) {
        const std::uint32_t v = static_cast<std::uint8_t>(bytes[i]) << 16;
        out += kAlphabet[(v >> 18) & 63];
        out += kAlphabet[(v >> 12) & 63];
        out += "==";
    } else if (i + 2 == bytes.size()) {
        const std::uint32_t v = (static_cast<std::uint8_t>(bytes[i]) << 16) | (static_cast<std::uint8_t>(bytes[i + 1]) << 8);
        out += kAlphabet[(v >> 18) & 63];
        out += kAlphabet[(v >> 12) & 63];
        out += kAlphabet[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

Service::Service(model::ModelBundle bundle, ServeConfig config)
    : bundle_(std::move(bundle)), config_(std::move(config)), server_(std::make_unique<httplib::Server>()) {
    if (config_.inference_workers < 1) throw PreconditionError("inference_workers must be at least 1");
    if (config_.queue_capacity < 0) throw PreconditionError("queue_capacity must be non-negative");
    if (config_.http_threads < 2) throw PreconditionError("http_threads must be at least 2");
    config_.scan.validate();
    const int threads = config_.http_threads;
    server_->new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
    server_->set_payload_max_length(config_.max_payload_bytes);
    install_routes();
}

Service::~Service() { stop(); }

void Service::install_routes() {
    auto guarded = [this](auto&& body) {
        return [this, body](const httplib::Request& req, httplib::Response& res) {
            try {
                body(req, res);
            } catch (const HttpError& e) {
                reply(res, e.status, json{{"error", e.reason}});
            } catch (const PreconditionError& e) {
                reply(res, 400, json{{"error", e.what()}});
            } catch (const std::exception& e) {
                log::warn(std::string("request failed: ") + e.what());
                reply(res, 500, json{{"error", e.what()}});
            }
        };
    };

    server_->Get("/health", guarded([this](const httplib::Request&, httplib::Response& res) {
        reply(res, 200, json{{"status", "ok"}, {"model", model::to_string(bundle_.model.spec().backbone)}});
    }));

    server_->Get("/model-info", guarded([this](const httplib::Request&, httplib::Response& res) {
        reply(res, 200, model::metadata(bundle_));
    }));

    server_->Post("/classify", guarded([this](const httplib::Request& req, httplib::Response& res) {
        const image::Image img = decode(image_bytes(req, nullptr));
        double threshold = config_.scan.threshold;
        const json params = request_params(req);
        for (const auto& [key, v] : params.items()) {
            if (key != "threshold") throw HttpError{400, "unknown parameter " + key};
            threshold = number(v, key);
        }
        Slot slot(*this);
        reply(res, 200, scan::to_json(scan::classify(bundle_, img, threshold)));
    }));

    server_->Post("/scan", guarded([this](const httplib::Request& req, httplib::Response& res) {
        std::string filename;
        const std::string bytes = image_bytes(req, &filename);
        ScanRequest sr = scan_request(request_params(req), config_.scan);
        const image::Image img = decode(bytes);
        if (sr.image_id.empty()) {
            sr.image_id = filename.empty() ? "upload" : std::filesystem::path(filename).stem().string();
        }
        scan::ScanResult result;
        {
            Slot slot(*this);
            result = scan::scan_image(bundle_, img, sr.image_id, sr.params);
        }
        json body = scan::to_json(result);
        if (sr.overlay) body["overlay_png_base64"] = base64_encode(image::encode_png(scan::render_overlay(result, img)));
        reply(res, 200, body);
    }));

    // Fills in JSON bodies for errors raised inside httplib (e.g. 413).
    server_->set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (!res.body.empty()) return;
        const std::string reason = res.status == 413   ? "payload exceeds the configured size limit"
                                   : res.status == 404 ? "no such endpoint"
                                                       : httplib::status_message(res.status);
        reply(res, res.status, json{{"error", reason}});
    });
}

void Service::bind() {
    if (config_.port == 0) {
        port_ = server_->bind_to_any_port(config_.host);
    } else {
        port_ = server_->bind_to_port(config_.host, config_.port) ? config_.port : -1;
    }
    if (port_ <= 0) throw Error("cannot bind " + config_.host + ":" + std::to_string(config_.port));
}

void Service::run() {
    log::info("serving " + model::to_string(bundle_.model.spec().backbone) + " on http://" + config_.host + ":" +
              std::to_string(port_));
    server_->listen_after_bind();
}

void Service::stop() {
    if (server_) server_->stop();
}

}  // namespace kohscan::serve
