#pragma once

// cpp-httplib backed Transport. Kept out of profiles.hpp so that only the
// translation units that actually talk to a network pull in httplib.

#include <string>
#include <utility>
#include <vector>

#include <httplib.h>

// <resolv.h>, pulled in by httplib, defines _res, which collides with Eigen
// parameter names. Nothing here needs the resolver state.
#ifdef _res
#undef _res
#endif

#include "profiles.hpp"

namespace cllmr::profiles {

class HttplibTransport final : public Transport {
 public:
  HttpResponse post(const std::string& url, const std::vector<std::pair<std::string, std::string>>& headers,
                    const std::string& body, double timeout_s) override {
    // scheme://host[:port]/path
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ParameterError("provider URL lacks a scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    const std::string origin = url.substr(0, path_start);
    const std::string path = path_start == std::string::npos ? "/" : url.substr(path_start);

    httplib::Client client(origin);
    const auto secs = static_cast<time_t>(timeout_s);
    const auto usecs = static_cast<time_t>((timeout_s - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);

    httplib::Headers h;
    std::string content_type = "application/json";
    for (const auto& [k, v] : headers) {
      if (k == "Content-Type")
        content_type = v;
      else
        h.emplace(k, v);
    }
    auto res = client.Post(path, h, body, content_type);
    if (!res) throw ProviderError("transport error: " + httplib::to_string(res.error()));
    return {res->status, res->body};
  }
};

}  // namespace cllmr::profiles
