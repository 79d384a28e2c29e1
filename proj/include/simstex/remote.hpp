#pragma once

#include <netdb.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <optional>
#include <string>
#include <utility>

#include "simstex/denoiser.hpp"
#include "simstex/wire.hpp"

namespace simstex {

struct BridgeAddress {
  std::string host = "127.0.0.1";
  int port = 0;
};

/// "host:port"; the last colon separates the port.
inline BridgeAddress parse_bridge_address(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == s.size())
    throw TransportError("bridge address must be host:port, got '" + s + "'");
  BridgeAddress a{s.substr(0, colon), 0};
  try {
    a.port = std::stoi(s.substr(colon + 1));
  } catch (const std::exception&) {
    throw TransportError("bad bridge port in '" + s + "'");
  }
  if (a.port <= 0 || a.port > 65535) throw TransportError("bridge port out of range in '" + s + "'");
  return a;
}

inline std::optional<BridgeAddress> bridge_address_from_env() {
  const char* v = std::getenv("SIMSTEX_BRIDGE_ADDR");
  if (v == nullptr || *v == '\0') return std::nullopt;
  return parse_bridge_address(v);
}

/// Owning TCP socket speaking whole frames.
class FrameSocket {
 public:
  FrameSocket() = default;
  explicit FrameSocket(int fd) : fd_(fd) {}
  FrameSocket(const FrameSocket&) = delete;
  FrameSocket& operator=(const FrameSocket&) = delete;
  FrameSocket(FrameSocket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  FrameSocket& operator=(FrameSocket&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~FrameSocket() { close(); }

  static FrameSocket connect(const BridgeAddress& addr, int timeout_sec = 120) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const std::string port = std::to_string(addr.port);
    if (int rc = ::getaddrinfo(addr.host.c_str(), port.c_str(), &hints, &res); rc != 0)
      throw TransportError("cannot resolve " + addr.host + ": " + ::gai_strerror(rc));
    std::string last = "no addresses";
    for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
      const int fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
      if (fd < 0) {
        last = std::strerror(errno);
        continue;
      }
      if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) {
        ::freeaddrinfo(res);
        timeval tv{timeout_sec, 0};
        ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
        ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
        return FrameSocket(fd);
      }
      last = std::strerror(errno);
      ::close(fd);
    }
    ::freeaddrinfo(res);
    throw TransportError("cannot connect to " + addr.host + ":" + port + ": " + last);
  }

  bool is_open() const { return fd_ >= 0; }

  void send_frame(const std::vector<std::uint8_t>& frame) {
    std::size_t sent = 0;
    while (sent < frame.size()) {
      const ssize_t n = ::send(fd_, frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
      if (n <= 0) {
        if (n < 0 && errno == EINTR) continue;
        throw TransportError(std::string("send failed: ") + std::strerror(errno));
      }
      sent += static_cast<std::size_t>(n);
    }
  }

  /// Receive one frame; returns its body (without the length prefix).
  std::vector<std::uint8_t> recv_body() {
    std::uint8_t prefix[4];
    recv_exact(prefix, 4);
    const std::uint32_t len = wire::get_u32(prefix);
    if (len > wire::kMaxFrame) throw ProtocolError("incoming frame too large");
    std::vector<std::uint8_t> body(len);
    recv_exact(body.data(), len);
    return body;
  }

  wire::Message roundtrip(const wire::Message& req) {
    send_frame(wire::encode(req));
    const auto body = recv_body();
    return wire::decode_body(body.data(), body.size());
  }

 private:
  void recv_exact(std::uint8_t* dst, std::size_t n) {
    std::size_t got = 0;
    while (got < n) {
      const ssize_t r = ::recv(fd_, dst + got, n - got, 0);
      if (r == 0) throw TransportError("bridge closed the connection");
      if (r < 0) {
        if (errno == EINTR) continue;
        throw TransportError(std::string("recv failed: ") + std::strerror(errno));
      }
      got += static_cast<std::size_t>(r);
    }
  }

  void close() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

  int fd_ = -1;
};

/// Epsilon predictions and decoding from a bridge process. Guidance is
/// applied server side: guided_epsilon sends both weights in one request.
/// Diffusion times travel as 0-based model indices (t - 1).
class RemoteDenoiser final : public Denoiser {
 public:
  explicit RemoteDenoiser(BridgeAddress addr) : addr_(std::move(addr)), sock_(FrameSocket::connect(addr_)) {}

  nlohmann::json info() {
    wire::Message req;
    req.header["op"] = "info";
    return checked(sock_.roundtrip(req)).header;
  }

  LatentImage predict_epsilon(const DenoiseRequest& req) override { return denoise(req, false); }
  LatentImage guided_epsilon(const DenoiseRequest& req) override { return denoise(req, true); }

  /// Latents (h x w x 4) to RGB in [0,1] at the bridge's output resolution.
  Grid<float> decode(const LatentImage& latents) {
    wire::Message req;
    req.header["op"] = "decode";
    req.tensors.push_back(wire::to_tensor("latents", latents));
    const wire::Message resp = checked(sock_.roundtrip(req));
    const wire::Tensor* rgb = resp.find("rgb");
    if (rgb == nullptr) throw ProtocolError("decode response lacks 'rgb'");
    return wire::from_tensor(*rgb);
  }

  /// Echo op: the bridge returns the request tensors unchanged.
  wire::Message echo(const wire::Message& m) {
    wire::Message req = m;
    req.header["op"] = "echo";
    return checked(sock_.roundtrip(req));
  }

  std::string describe() const override { return "remote:" + addr_.host + ":" + std::to_string(addr_.port); }

 private:
  static wire::Message checked(wire::Message resp) {
    if (resp.header.value("status", "ok") != "ok")
      throw ProtocolError("bridge error: " + resp.header.value("error", std::string("unspecified")));
    return resp;
  }

  LatentImage denoise(const DenoiseRequest& req, bool guided) {
    wire::Message m;
    m.header["op"] = "denoise";
    m.header["t"] = req.t - 1;
    m.header["prompt"] = req.view_suffix.empty() ? req.prompt : req.prompt + ", " + req.view_suffix;
    if (guided) {
      m.header["guidance"] = req.guidance;
    } else {
      m.header["conditioning"] = req.conditioning == Conditioning::unconditional ? "unconditional"
                                 : req.conditioning == Conditioning::joint       ? "joint"
                                                                                 : "text";
    }
    m.tensors.push_back(wire::to_tensor("latents", req.latents));
    if (req.depth.size() > 0) m.tensors.push_back(wire::to_tensor("depth", req.depth));
    const wire::Message resp = checked(sock_.roundtrip(m));
    const wire::Tensor* eps = resp.find("eps");
    if (eps == nullptr) eps = resp.find("latents");  // echo-mode bridges answer with the request tensor
    if (eps == nullptr) throw ProtocolError("denoise response lacks 'eps'");
    LatentImage out = wire::from_tensor(*eps);
    require_same_shape(out, req.latents, "remote epsilon");
    return out;
  }

  BridgeAddress addr_;
  FrameSocket sock_;
};

}  // namespace simstex
