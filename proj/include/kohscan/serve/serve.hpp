#pragma once

#include <condition_variable>
#include <cstddef>
#include <memory>
#include <mutex>
#include <string>

#include "kohscan/model/bundle.hpp"
#include "kohscan/scan/scan.hpp"

namespace httplib {
class Server;
}

namespace kohscan::serve {

struct ServeConfig {
    std::string host = "127.0.0.1";
    /// 0 binds an ephemeral port (see Service::port()).
    int port = 8080;
    std::size_t max_payload_bytes = 64ull << 20;
    /// Concurrent inference calls; further requests wait in the queue.
    int inference_workers = 1;
    /// Requests allowed to wait for a worker before new ones get 503.
    int queue_capacity = 16;
    /// Request-handling threads (health and metadata never wait on inference).
    int http_threads = 8;
    /// Defaults for /scan and /classify; request parameters override them.
    scan::ScanParams scan;
};

/// HTTP front end over one loaded model.
///
///   GET  /health       {"status":"ok","model":<backbone>}
///   GET  /model-info   bundle metadata (spec, counts, format_version)
///   POST /classify     raw image bytes or multipart field "image"; ?threshold=
///   POST /scan         multipart "image" (+ optional "params" JSON) or raw
///                      bytes with query parameters; returns the ScanResult
///                      document, with "overlay_png_base64" when overlay=true
///
/// Errors carry {"error": reason}: 400 bad input, 413 oversize, 503 queue full.
class Service {
public:
    Service(model::ModelBundle bundle, ServeConfig config);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    /// Binds the socket; throws Error when the address is unavailable.
    void bind();
    /// Serves until stop(); in-flight requests finish before it returns.
    void run();
    void stop();
    int port() const { return port_; }

    const model::ModelBundle& bundle() const { return bundle_; }

private:
    class Slot;
    void install_routes();

    model::ModelBundle bundle_;
    ServeConfig config_;
    std::unique_ptr<httplib::Server> server_;
    int port_ = 0;

    std::mutex mutex_;
    std::condition_variable cv_;
    int busy_ = 0;
    int waiting_ = 0;
};

std::string base64_encode(std::string_view bytes);

}  // namespace kohscan::serve
