// Eigen must come before httplib: a macro from the socket headers breaks it.
#include "radkd/inference.hpp"

#include <atomic>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "radkd/error.hpp"

namespace radkd {

namespace {

std::mutex g_server_mu;
httplib::Server* g_server = nullptr;
std::atomic<int> g_port{0};

}  // namespace

void serve(std::shared_ptr<AnalysisService> service, const ServeOptions& opts) {
    httplib::Server server;
    server.new_task_queue = [n = opts.workers] { return new httplib::ThreadPool(n ? n : 1); };

    const std::string origin = opts.cors_origin;
    server.set_default_headers({{"Access-Control-Allow-Origin", origin},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"}});
    server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    server.Get("/healthz", [service](const httplib::Request&, httplib::Response& res) {
        const auto r = service->health();
        res.status = r.status;
        res.set_content(r.body, "application/json");
    });
    server.Post("/analyze", [service](const httplib::Request& req, httplib::Response& res) {
        const auto r = service->analyze(req.body);
        res.status = r.status;
        res.set_content(r.body, "application/json");
    });

    int port = opts.port;
    if (port == 0) {
        port = server.bind_to_any_port(opts.host);
    } else if (!server.bind_to_port(opts.host, port)) {
        port = -1;
    }
    if (port < 0) throw Error("BindError", "cannot bind " + opts.host + ":" + std::to_string(opts.port));
    {
        std::lock_guard lock(g_server_mu);
        g_server = &server;
        g_port = port;
    }
    spdlog::info("serving on http://{}:{}", opts.host, port);
    server.listen_after_bind();
    std::lock_guard lock(g_server_mu);
    g_server = nullptr;
    g_port = 0;
}

void stop_serving() {
    std::lock_guard lock(g_server_mu);
    if (!g_server) return;
    // a stop issued between bind and listen would otherwise be lost
    g_server->wait_until_ready();
    g_server->stop();
}

int bound_port() { return g_port.load(); }

}  // namespace radkd
