#pragma once

#include <httplib.h>

#include <chrono>
#include <memory>
#include <string>

#include "adret/errors.hpp"
#include "adret/provider.hpp"

namespace adret {

// Real transport on top of cpp-httplib (TLS included). Splits a full URL
// into base + path because httplib clients are bound to a host.
class HttplibTransport final : public HttpTransport {
 public:
  HttpResponse post(
      const std::string& url,
      const std::vector<std::pair<std::string, std::string>>& headers,
      const std::string& body, std::chrono::milliseconds timeout) override {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos)
      throw ProviderError("endpoint url has no scheme: " + url);
    auto path_start = url.find('/', scheme_end + 3);
    std::string base =
        path_start == std::string::npos ? url : url.substr(0, path_start);
    std::string path =
        path_start == std::string::npos ? "/" : url.substr(path_start);

    httplib::Client client(base);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    httplib::Headers hdrs;
    std::string content_type = "application/json";
    for (const auto& [name, value] : headers) {
      if (name == "Content-Type")
        content_type = value;
      else
        hdrs.emplace(name, value);
    }
    auto res = client.Post(path, hdrs, body, content_type);
    if (!res)
      throw ProviderError("transport failure: " + httplib::to_string(res.error()));
    return {res->status, res->body};
  }
};

inline std::unique_ptr<EmbeddingProvider> make_provider(
    const ProviderSpec& spec) {
  if (spec.kind == ProviderSpec::Kind::stub) return make_stub_provider(spec);
  return std::make_unique<RemoteProvider>(spec,
                                          std::make_shared<HttplibTransport>());
}

}  // namespace adret
