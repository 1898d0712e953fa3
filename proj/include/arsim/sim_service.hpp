#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "arsim/codec.hpp"
#include "arsim/model.hpp"
#include "arsim/rollout.hpp"
#include "arsim/scene.hpp"

namespace arsim {

// Wire format: one JSON object per line, field "type" in
// {init, step, frame, error, close}. Tensors travel as
// {"shape": [...], "data": base64 of little-endian f32}.

using Json = nlohmann::json;

/// Failure of the transport (connect, send, receive) or of the peer.
class TransportError : public std::runtime_error {
public:
    TransportError(int step, const std::string& what)
        : std::runtime_error(step >= 0 ? "step " + std::to_string(step) + ": " + what : what), step_(step) {}
    int step() const { return step_; }

private:
    int step_;
};

std::string base64_encode(const void* data, size_t bytes);
std::vector<uint8_t> base64_decode(const std::string& text);

Json tensor_to_json(const Tensor& t);
/// Throws ContractViolation on a malformed encoding or a shape/payload mismatch.
Tensor tensor_from_json(const Json& j);

/// Per-frame controls supplied by the agent. Cameras may be omitted after
/// init; the session keeps the last ones it saw.
Json controls_to_json(const ControlState& cs, const Tensor& canvas);

struct ServiceOptions {
    size_t max_line_bytes = 16u << 20;
    SamplerConfig sampler;  // defaults that init may override
};

/// Protocol state machine of one connection. Independent of the transport.
class SimSession {
public:
    SimSession(std::shared_ptr<const Model> model, const ServiceOptions& options, uint64_t id);

    /// Exactly one reply per request line.
    Json handle(const std::string& line);
    /// Reply to a line that exceeded the size bound.
    Json oversized(size_t bytes) const;
    /// Set once the connection must be closed (close, or a fatal error).
    bool finished() const { return finished_; }
    bool initialized() const { return session_ != nullptr; }
    int last_index() const { return last_index_; }

private:
    Json on_init(const Json& msg);
    Json on_step(const Json& msg);
    Json on_close();
    Json error(const std::string& message, bool fatal);
    FrameControls read_controls(const Json& j);

    std::shared_ptr<const Model> model_;
    ServiceOptions options_;
    PatchCodec codec_;
    uint64_t id_;
    std::unique_ptr<Session> session_;
    Tensor cameras_;
    std::array<int, kCaptionTokens> caption_{};
    std::optional<ControlState> prev_cs_;
    Tensor prev_canvas_;
    int last_index_ = -1;
    bool finished_ = false;
};

/// TCP listener with one handler thread per connection.
class SimServer {
public:
    SimServer(std::shared_ptr<const Model> model, ServiceOptions options = {});
    ~SimServer();
    SimServer(const SimServer&) = delete;
    SimServer& operator=(const SimServer&) = delete;

    /// Binds `host:port` (port 0 picks a free one) and starts accepting.
    void start(const std::string& address);
    /// Blocks until stop() is called from another thread.
    void wait();
    void stop();
    int port() const { return port_; }
    std::string address() const;

private:
    void accept_loop();
    void serve_connection(int fd, uint64_t id);

    std::shared_ptr<const Model> model_;
    ServiceOptions options_;
    std::string host_;
    int port_ = 0;
    int listen_fd_ = -1;
    std::atomic<bool> running_{false};
    std::atomic<uint64_t> next_id_{1};
    std::thread acceptor_;
    std::mutex mu_;
    std::vector<std::thread> handlers_;
    std::vector<int> client_fds_;
};

/// `host:port`; throws ContractViolation when malformed.
std::pair<std::string, int> parse_address(const std::string& address);
/// FAR_ADDR when set, otherwise `fallback`.
std::string default_address(const std::string& fallback = "127.0.0.1:7878");

/// Blocking line-oriented client.
class SimClient {
public:
    explicit SimClient(const std::string& address, double timeout_s = 120.0);
    ~SimClient();
    SimClient(const SimClient&) = delete;
    SimClient& operator=(const SimClient&) = delete;

    void send_line(const std::string& line);
    std::string read_line();
    Json request(const Json& msg);

private:
    int fd_ = -1;
    std::string buffer_;
};

struct AgentOptions {
    SceneConfig scene;  // frames is set from n_steps
    SamplerConfig sampler;
    bool send_first_frame = true;
    int perturb_step = -1;          // step whose action is altered, -1 = none
    double perturb_lateral = 1.5;   // metres added to the ego's lateral position
};

struct AgentFrame {
    int frame_index = 0;
    std::string payload;  // base64 images as received
    Shape shape;
    double latency_ms = 0.0;  // reported by the server
    double round_trip_ms = 0.0;
};

struct AgentTranscript {
    uint64_t session_id = 0;
    Json effective_config;
    std::vector<AgentFrame> frames;
    double mean_round_trip_ms = 0.0;
    double max_round_trip_ms = 0.0;
};

/// Drives a straight-road scene from ground truth: init (with frame 0), then
/// n_steps steps carrying the controls of frames 1..n_steps, then close.
/// Step k submits the action that produces frame k + 1.
AgentTranscript run_scripted_agent(const std::string& address, uint64_t scenario_seed, int n_steps,
                                   const AgentOptions& options = {});

}  // namespace arsim
