#include <httplib.h>

#include <nlohmann/json.hpp>

#include "radkd/error.hpp"
#include "radkd/teacher.hpp"

namespace radkd {

HttpChatEndpoint::HttpChatEndpoint(std::string url, std::string api_key, std::chrono::seconds timeout)
    : api_key_(std::move(api_key)), timeout_(timeout) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("teacher URL needs a scheme: " + url);
    const auto path_begin = url.find('/', scheme_end + 3);
    scheme_host_ = url.substr(0, path_begin);
    path_ = path_begin == std::string::npos ? "" : url.substr(path_begin);
    while (!path_.empty() && path_.back() == '/') path_.pop_back();
    if (path_.empty()) path_ = "/v1/chat/completions";
    else if (!path_.ends_with("/chat/completions")) path_ += "/chat/completions";
}

std::string HttpChatEndpoint::request_body(const ChatRequest& req) {
    nlohmann::ordered_json messages = nlohmann::ordered_json::array();
    for (const auto& m : req.messages) messages.push_back({{"role", m.role}, {"content", m.content}});
    return nlohmann::ordered_json{{"model", req.model},
                                  {"messages", messages},
                                  {"temperature", req.temperature}}
        .dump();
}

std::string HttpChatEndpoint::response_content(std::string_view body) {
    try {
        const auto j = nlohmann::json::parse(body);
        return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw TeacherParseError(std::string("malformed completion response: ") + e.what());
    }
}

std::string HttpChatEndpoint::complete(const ChatRequest& req) {
    httplib::Client cli(scheme_host_);
    cli.set_connection_timeout(timeout_);
    cli.set_read_timeout(timeout_);
    cli.set_write_timeout(timeout_);
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

    auto res = cli.Post(path_, headers, request_body(req), "application/json");
    if (!res) throw TransientError("HTTP error: " + httplib::to_string(res.error()));
    if (res->status == 429 || res->status >= 500) {
        throw TransientError("HTTP " + std::to_string(res->status));
    }
    if (res->status != 200) {
        throw TeacherUnavailable("HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
    }
    return response_content(res->body);
}

}  // namespace radkd
