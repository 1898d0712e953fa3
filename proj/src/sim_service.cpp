#include "arsim/sim_service.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sodium.h>
#include <sys/socket.h>
#include <unistd.h>

#include <bit>
#include <chrono>
#include <cstdlib>
#include <cstring>

#include "arsim/errors.hpp"
#include "arsim/ops.hpp"

namespace arsim {

static_assert(std::endian::native == std::endian::little, "wire tensors are little-endian f32");

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

void init_sodium() {
    static const int rc = sodium_init();
    if (rc < 0) throw std::runtime_error("libsodium initialization failed");
}

bool send_all(int fd, const std::string& data) {
    size_t sent = 0;
    while (sent < data.size()) {
        const ssize_t n = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) return false;
        sent += static_cast<size_t>(n);
    }
    return true;
}

void expect_shape(const Tensor& t, const Shape& want, const std::string& what) {
    if (t.shape() != want) throw ContractViolation(what + ": expected shape " + shape_str(want) + ", got " + shape_str(t.shape()));
}

Tensor identity4() {
    std::vector<float> v(16, 0.0f);
    for (int i = 0; i < 4; ++i) v[static_cast<size_t>(i * 5)] = 1.0f;
    return Tensor::from({4, 4}, v);
}

Json sampler_json(const SamplerConfig& s) {
    return Json{{"steps", s.steps},       {"cfg_scale", s.cfg_scale},   {"kv_cache", s.kv_cache},
                {"cond_cache", s.cond_cache}, {"ref_window", s.ref_window}, {"seed", s.seed}};
}

SamplerConfig apply_sampler(SamplerConfig s, const Json& j) {
    if (!j.is_object()) throw ContractViolation("sampler must be an object");
    for (const auto& [key, value] : j.items()) {
        if (key == "steps") s.steps = value.get<int>();
        else if (key == "cfg_scale") s.cfg_scale = value.get<float>();
        else if (key == "kv_cache") s.kv_cache = value.get<bool>();
        else if (key == "cond_cache") s.cond_cache = value.get<bool>();
        else if (key == "ref_window") s.ref_window = value.get<int>();
        else if (key == "seed") s.seed = value.get<uint64_t>();
        else throw ContractViolation("unknown sampler key '" + key + "'");
    }
    s.validate();
    return s;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string base64_encode(const void* data, size_t bytes) {
    init_sodium();
    const size_t len = sodium_base64_encoded_len(bytes, sodium_base64_VARIANT_ORIGINAL);
    std::string out(len, '\0');
    sodium_bin2base64(out.data(), len, static_cast<const unsigned char*>(data), bytes, sodium_base64_VARIANT_ORIGINAL);
    out.resize(len - 1);  // drop the terminator
    return out;
}

std::vector<uint8_t> base64_decode(const std::string& text) {
    init_sodium();
    std::vector<uint8_t> out(text.size() / 4 * 3 + 3);
    size_t n = 0;
    const char* end = nullptr;
    if (sodium_base642bin(out.data(), out.size(), text.data(), text.size(), nullptr, &n, &end, sodium_base64_VARIANT_ORIGINAL) != 0 ||
        end != text.data() + text.size()) {
        throw ContractViolation("invalid base64 payload");
    }
    out.resize(n);
    return out;
}

Json tensor_to_json(const Tensor& t) {
    return Json{{"shape", t.shape()}, {"data", base64_encode(t.ptr(), static_cast<size_t>(t.numel()) * sizeof(float))}};
}

Tensor tensor_from_json(const Json& j) {
    if (!j.is_object() || !j.contains("shape") || !j.contains("data")) throw ContractViolation("tensor needs 'shape' and 'data'");
    if (!j["shape"].is_array() || !j["data"].is_string()) throw ContractViolation("tensor 'shape' must be an array and 'data' a string");
    Shape shape;
    int64_t n = 1;
    for (const auto& d : j["shape"]) {
        if (!d.is_number_integer() || d.get<int64_t>() < 0 || d.get<int64_t>() > (1 << 24)) throw ContractViolation("bad tensor dimension");
        shape.push_back(d.get<int>());
        n *= shape.back();
        if (n > (int64_t{1} << 30)) throw ContractViolation("tensor too large");
    }
    const std::vector<uint8_t> bytes = base64_decode(j["data"].get<std::string>());
    if (bytes.size() != static_cast<size_t>(n) * sizeof(float)) {
        throw ContractViolation("tensor payload has " + std::to_string(bytes.size()) + " bytes, shape " + shape_str(shape) +
                                " needs " + std::to_string(n * 4));
    }
    FloatBuffer values(static_cast<size_t>(n));
    if (n > 0) std::memcpy(values.data(), bytes.data(), bytes.size());
    return Tensor::adopt(std::move(shape), std::move(values));
}

Json controls_to_json(const ControlState& cs, const Tensor& canvas) {
    Json j{{"boxes", tensor_to_json(cs.boxes)},
           {"box_mask", tensor_to_json(cs.box_mask)},
           {"bev", tensor_to_json(cs.bev)},
           {"ego", tensor_to_json(cs.ego)},
           {"canvas", tensor_to_json(canvas)}};
    if (cs.cameras.defined()) j["cameras"] = tensor_to_json(cs.cameras);
    return j;
}

// ---------------------------------------------------------------------------

SimSession::SimSession(std::shared_ptr<const Model> model, const ServiceOptions& options, uint64_t id)
    : model_(std::move(model)), options_(options), codec_(model_->config().patch, model_->config().codec_seed), id_(id) {}

Json SimSession::error(const std::string& message, bool fatal) {
    if (fatal) finished_ = true;
    return Json{{"type", "error"}, {"message", message}, {"fatal", fatal}};
}

Json SimSession::oversized(size_t bytes) const {
    return Json{{"type", "error"},
                {"message", "line of " + std::to_string(bytes) + " bytes exceeds the limit of " +
                                std::to_string(options_.max_line_bytes)},
                {"fatal", false}};
}

FrameControls SimSession::read_controls(const Json& j) {
    if (!j.is_object()) throw ContractViolation("'controls' must be an object");
    const ModelConfig& mc = model_->config();
    for (const char* key : {"boxes", "box_mask", "bev", "ego", "canvas"}) {
        if (!j.contains(key)) throw ContractViolation(std::string("controls missing '") + key + "'");
    }
    FrameControls f;
    if (j.contains("cameras")) {
        f.cs.cameras = tensor_from_json(j["cameras"]);
        expect_shape(f.cs.cameras, {mc.views, 3, 7}, "cameras");
    } else if (cameras_.defined()) {
        f.cs.cameras = cameras_;
    } else {
        throw ContractViolation("controls missing 'cameras'");
    }
    f.cs.boxes = tensor_from_json(j["boxes"]);
    expect_shape(f.cs.boxes, {kMaxBoxes, kBoxFields}, "boxes");
    f.cs.box_mask = tensor_from_json(j["box_mask"]);
    expect_shape(f.cs.box_mask, {kMaxBoxes}, "box_mask");
    f.cs.bev = tensor_from_json(j["bev"]);
    expect_shape(f.cs.bev, {kBevSize, kBevSize, kBevChannels}, "bev");
    f.cs.ego = tensor_from_json(j["ego"]);
    expect_shape(f.cs.ego, {4, 4}, "ego");
    f.canvas = tensor_from_json(j["canvas"]);
    expect_shape(f.canvas, {mc.views, mc.height, mc.width, mc.canvas_channels}, "canvas");
    f.cs.caption = caption_;
    f.prev_ego = prev_cs_ ? prev_cs_->ego : identity4();
    f.prev_canvas = prev_canvas_.defined() ? prev_canvas_ : Tensor::zeros(f.canvas.shape());
    for (const Tensor* t : {&f.cs.cameras, &f.cs.boxes, &f.cs.box_mask, &f.cs.bev, &f.cs.ego, &f.canvas}) {
        for (float v : t->data()) {
            if (!std::isfinite(v)) throw ContractViolation("controls contain non-finite values");
        }
    }
    return f;
}

Json SimSession::handle(const std::string& line) {
    if (finished_) return error("session is closed", true);
    Json msg;
    try {
        msg = Json::parse(line);
    } catch (const Json::parse_error& e) {
        return error(std::string("malformed message: ") + e.what(), false);
    }
    if (!msg.is_object() || !msg.contains("type") || !msg["type"].is_string()) return error("message needs a string 'type'", false);
    const std::string type = msg["type"].get<std::string>();
    try {
        if (type == "init") return on_init(msg);
        if (type == "step") return on_step(msg);
        if (type == "close") return on_close();
        if (type == "frame" || type == "error") return error("'" + type + "' is a server message", false);
        return error("unknown message type '" + type + "'", false);
    } catch (const ContractViolation& e) {
        return error(e.what(), false);
    } catch (const Json::exception& e) {
        return error(std::string("malformed message: ") + e.what(), false);
    }
}

Json SimSession::on_init(const Json& msg) {
    if (session_) return error("session already initialized", false);
    if (!msg.contains("scene_seed") || !msg["scene_seed"].is_number_unsigned()) {
        throw ContractViolation("init needs an unsigned 'scene_seed'");
    }
    SamplerConfig sampler = options_.sampler;
    sampler.seed = msg["scene_seed"].get<uint64_t>();
    if (msg.contains("sampler")) sampler = apply_sampler(sampler, msg["sampler"]);
    if (msg.contains("caption")) {
        const auto cap = msg["caption"].get<std::vector<int>>();
        if (cap.size() != kCaptionTokens) throw ContractViolation("caption needs " + std::to_string(kCaptionTokens) + " tokens");
        for (size_t i = 0; i < cap.size(); ++i) {
            if (cap[i] < 0 || cap[i] >= kCaptionVocab) throw ContractViolation("caption token out of range");
            caption_[i] = cap[i];
        }
    }
    if (!msg.contains("controls")) throw ContractViolation("init needs frame-0 'controls'");
    const ModelConfig& mc = model_->config();
    FrameControls fc = read_controls(msg["controls"]);
    std::optional<Tensor> first;
    if (msg.contains("first_frame")) {
        first = tensor_from_json(msg["first_frame"]);
        expect_shape(*first, {mc.views, mc.height, mc.width, 3}, "first_frame");
    }

    auto session = std::make_unique<Session>(*model_, sampler);
    Json reply{{"type", "init"}, {"session", id_}, {"frame_index", 0}};
    const auto start = Clock::now();
    if (first) {
        const Tensor z = codec_.encode_image(*first);
        session->push_reference(reshape(z, {mc.views, mc.tokens_per_frame(), mc.latent_channels()}), fc);
    } else {
        const Tensor z = session->sample_frame(fc);
        reply["images"] = tensor_to_json(codec_.decode_image(reshape(z, {mc.views, mc.grid_h(), mc.grid_w(), mc.latent_channels()})));
    }
    reply["latency_ms"] = ms_since(start);
    session_ = std::move(session);
    cameras_ = fc.cs.cameras;
    prev_cs_ = fc.cs;
    prev_canvas_ = fc.canvas;
    last_index_ = 0;

    Json config = sampler_json(sampler);
    config["views"] = mc.views;
    config["height"] = mc.height;
    config["width"] = mc.width;
    config["max_line_bytes"] = options_.max_line_bytes;
    reply["config"] = config;
    return reply;
}

Json SimSession::on_step(const Json& msg) {
    if (!session_) return error("step before init", false);
    if (!msg.contains("frame_index") || !msg["frame_index"].is_number_integer()) {
        throw ContractViolation("step needs an integer 'frame_index'");
    }
    const int64_t idx = msg["frame_index"].get<int64_t>();
    if (idx != last_index_ + 1) {
        return error("out-of-order frame_index " + std::to_string(idx) + ", expected " + std::to_string(last_index_ + 1), true);
    }
    if (!msg.contains("controls")) throw ContractViolation("step needs 'controls'");
    const FrameControls fc = read_controls(msg["controls"]);
    const ModelConfig& mc = model_->config();

    const auto start = Clock::now();
    const Tensor z = session_->sample_frame(fc);
    const Tensor images = codec_.decode_image(reshape(z, {mc.views, mc.grid_h(), mc.grid_w(), mc.latent_channels()}));
    const double latency = ms_since(start);

    cameras_ = fc.cs.cameras;
    prev_cs_ = fc.cs;
    prev_canvas_ = fc.canvas;
    last_index_ = static_cast<int>(idx);
    return Json{{"type", "frame"}, {"frame_index", idx}, {"images", tensor_to_json(images)}, {"latency_ms", latency}};
}

Json SimSession::on_close() {
    finished_ = true;
    return Json{{"type", "close"}, {"frames", last_index_ + 1}};
}

// ---------------------------------------------------------------------------

std::pair<std::string, int> parse_address(const std::string& address) {
    const size_t colon = address.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == address.size()) {
        throw ContractViolation("address must be host:port, got '" + address + "'");
    }
    const std::string host = address.substr(0, colon);
    int port = -1;
    try {
        size_t used = 0;
        port = std::stoi(address.substr(colon + 1), &used);
        if (used != address.size() - colon - 1) port = -1;
    } catch (const std::exception&) {
        port = -1;
    }
    if (port < 0 || port > 65535) throw ContractViolation("bad port in address '" + address + "'");
    return {host, port};
}

std::string default_address(const std::string& fallback) {
    const char* env = std::getenv("FAR_ADDR");
    return env && *env ? std::string(env) : fallback;
}

namespace {

addrinfo* resolve(const std::string& host, int port, bool passive) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    if (passive) hints.ai_flags = AI_PASSIVE;
    addrinfo* res = nullptr;
    const int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res);
    if (rc != 0) throw TransportError(-1, "cannot resolve '" + host + "': " + gai_strerror(rc));
    return res;
}

}  // namespace

SimServer::SimServer(std::shared_ptr<const Model> model, ServiceOptions options)
    : model_(std::move(model)), options_(std::move(options)) {
    options_.sampler.validate();
}

SimServer::~SimServer() { stop(); }

void SimServer::start(const std::string& address) {
    if (running_) throw ContractViolation("SimServer: already running");
    auto [host, port] = parse_address(address);
    addrinfo* res = resolve(host, port, true);
    listen_fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (listen_fd_ < 0) {
        ::freeaddrinfo(res);
        throw TransportError(-1, std::string("socket: ") + std::strerror(errno));
    }
    const int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(listen_fd_, res->ai_addr, res->ai_addrlen) != 0 || ::listen(listen_fd_, 16) != 0) {
        const std::string msg = std::strerror(errno);
        ::freeaddrinfo(res);
        ::close(listen_fd_);
        listen_fd_ = -1;
        throw TransportError(-1, "cannot listen on " + address + ": " + msg);
    }
    ::freeaddrinfo(res);
    sockaddr_in bound{};
    socklen_t len = sizeof bound;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
    host_ = host;
    port_ = ntohs(bound.sin_port);
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
}

std::string SimServer::address() const { return host_ + ":" + std::to_string(port_); }

void SimServer::accept_loop() {
    while (running_) {
        pollfd p{listen_fd_, POLLIN, 0};
        const int r = ::poll(&p, 1, 100);
        if (r <= 0) continue;
        const int fd = ::accept(listen_fd_, nullptr, nullptr);
        if (fd < 0) continue;
        const int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        std::lock_guard<std::mutex> lock(mu_);
        if (!running_) {
            ::close(fd);
            break;
        }
        client_fds_.push_back(fd);
        const uint64_t id = next_id_++;
        handlers_.emplace_back([this, fd, id] { serve_connection(fd, id); });
    }
}

void SimServer::serve_connection(int fd, uint64_t id) {
    SimSession session(model_, options_, id);
    std::string buffer;
    bool discarding = false;  // inside an oversized line
    size_t discarded = 0;
    char chunk[65536];
    auto reply = [&](const Json& j) { return send_all(fd, j.dump() + "\n"); };
    bool open = true;
    while (open && !session.finished()) {
        const ssize_t n = ::recv(fd, chunk, sizeof chunk, 0);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) break;
        size_t pos = 0;
        while (pos < static_cast<size_t>(n) && open && !session.finished()) {
            const char* nl = static_cast<const char*>(std::memchr(chunk + pos, '\n', static_cast<size_t>(n) - pos));
            const size_t end = nl ? static_cast<size_t>(nl - chunk) : static_cast<size_t>(n);
            if (discarding) {
                discarded += end - pos;
            } else {
                buffer.append(chunk + pos, end - pos);
                if (buffer.size() > options_.max_line_bytes) {
                    discarding = true;
                    discarded = buffer.size();
                    buffer.clear();
                    buffer.shrink_to_fit();
                }
            }
            if (nl) {
                if (discarding) {
                    open = reply(session.oversized(discarded));
                    discarding = false;
                } else {
                    if (!buffer.empty() && buffer.back() == '\r') buffer.pop_back();
                    open = reply(session.handle(buffer));
                    buffer.clear();
                }
            }
            pos = end + (nl ? 1 : 0);
        }
    }
    ::shutdown(fd, SHUT_RDWR);
    std::lock_guard<std::mutex> lock(mu_);
    for (int& c : client_fds_) {
        if (c == fd) c = -1;
    }
    ::close(fd);
}

void SimServer::wait() {
    while (running_) std::this_thread::sleep_for(std::chrono::milliseconds(100));
}

void SimServer::stop() {
    if (!running_.exchange(false)) {
        if (acceptor_.joinable()) acceptor_.join();
        return;
    }
    if (acceptor_.joinable()) acceptor_.join();
    std::vector<std::thread> handlers;
    {
        std::lock_guard<std::mutex> lock(mu_);
        for (int fd : client_fds_) {
            if (fd >= 0) ::shutdown(fd, SHUT_RDWR);
        }
        handlers.swap(handlers_);
    }
    for (auto& t : handlers) t.join();
    if (listen_fd_ >= 0) ::close(listen_fd_);
    listen_fd_ = -1;
    client_fds_.clear();
}

// ---------------------------------------------------------------------------

SimClient::SimClient(const std::string& address, double timeout_s) {
    auto [host, port] = parse_address(address);
    addrinfo* res = resolve(host, port, false);
    fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (fd_ < 0 || ::connect(fd_, res->ai_addr, res->ai_addrlen) != 0) {
        const std::string msg = std::strerror(errno);
        ::freeaddrinfo(res);
        if (fd_ >= 0) ::close(fd_);
        fd_ = -1;
        throw TransportError(-1, "cannot connect to " + address + ": " + msg);
    }
    ::freeaddrinfo(res);
    const int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    timeval tv{};
    tv.tv_sec = static_cast<time_t>(timeout_s);
    tv.tv_usec = static_cast<suseconds_t>((timeout_s - static_cast<double>(tv.tv_sec)) * 1e6);
    ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
    ::setsockopt(fd_, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
}

SimClient::~SimClient() {
    if (fd_ >= 0) ::close(fd_);
}

void SimClient::send_line(const std::string& line) {
    if (!send_all(fd_, line + "\n")) throw TransportError(-1, std::string("send failed: ") + std::strerror(errno));
}

std::string SimClient::read_line() {
    char chunk[65536];
    for (;;) {
        const size_t nl = buffer_.find('\n');
        if (nl != std::string::npos) {
            std::string line = buffer_.substr(0, nl);
            buffer_.erase(0, nl + 1);
            return line;
        }
        const ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
        if (n < 0 && errno == EINTR) continue;
        if (n < 0) throw TransportError(-1, std::string("receive failed: ") + std::strerror(errno));
        if (n == 0) throw TransportError(-1, "connection closed by peer");
        buffer_.append(chunk, static_cast<size_t>(n));
    }
}

Json SimClient::request(const Json& msg) {
    send_line(msg.dump());
    return Json::parse(read_line());
}

// ---------------------------------------------------------------------------

AgentTranscript run_scripted_agent(const std::string& address, uint64_t scenario_seed, int n_steps, const AgentOptions& options) {
    if (n_steps < 0) throw ContractViolation("run_scripted_agent: n_steps must be >= 0");
    SceneConfig sc = options.scene;
    sc.frames = n_steps + 1;
    sc.straight_road = true;
    const SceneRecord scene = make_scene(scenario_seed, sc);

    std::unique_ptr<SimClient> client;
    try {
        client = std::make_unique<SimClient>(address);
    } catch (const TransportError& e) {
        throw TransportError(0, e.what());
    }
    auto call = [&](const Json& msg, int step) {
        try {
            Json r = client->request(msg);
            if (r.value("type", "") == "error") throw TransportError(step, "server error: " + r.value("message", ""));
            return r;
        } catch (const Json::exception& e) {
            throw TransportError(step, std::string("bad reply: ") + e.what());
        } catch (const TransportError& e) {
            if (e.step() >= 0) throw;
            throw TransportError(step, e.what());
        }
    };

    AgentTranscript out;
    Json init{{"type", "init"},
              {"scene_seed", scenario_seed},
              {"sampler", sampler_json(options.sampler)},
              {"caption", scene.caption},
              {"controls", controls_to_json(scene.control(0), scene.canvas(0))}};
    if (options.send_first_frame) init["first_frame"] = tensor_to_json(scene.frame(0));
    const Json ack = call(init, -1);
    out.session_id = ack.value("session", uint64_t{0});
    out.effective_config = ack.value("config", Json::object());

    const Shape expect{sc.views, sc.height, sc.width, 3};
    double total_rtt = 0.0;
    for (int step = 0; step < n_steps; ++step) {
        const int idx = step + 1;
        ControlState cs = scene.control(idx);
        cs.cameras = Tensor();  // unchanged rig; the session keeps it
        if (step == options.perturb_step) {
            std::vector<float> ego(cs.ego.data().begin(), cs.ego.data().end());
            ego[7] += static_cast<float>(options.perturb_lateral);  // row 1, translation column
            cs.ego = Tensor::from({4, 4}, ego);
        }
        const Json msg{{"type", "step"}, {"frame_index", idx}, {"controls", controls_to_json(cs, scene.canvas(idx))}};
        const auto start = Clock::now();
        const Json r = call(msg, step);
        const double rtt = ms_since(start);
        if (r.value("type", "") != "frame" || r.value("frame_index", -1) != idx) {
            throw TransportError(step, "unexpected reply " + r.value("type", std::string("?")));
        }
        AgentFrame f;
        f.frame_index = idx;
        f.shape = r["images"]["shape"].get<Shape>();
        if (f.shape != expect) throw TransportError(step, "reply images have shape " + shape_str(f.shape));
        f.payload = r["images"]["data"].get<std::string>();
        f.latency_ms = r.value("latency_ms", 0.0);
        f.round_trip_ms = rtt;
        total_rtt += rtt;
        out.max_round_trip_ms = std::max(out.max_round_trip_ms, rtt);
        out.frames.push_back(std::move(f));
    }
    out.mean_round_trip_ms = n_steps > 0 ? total_rtt / n_steps : 0.0;
    const Json bye = call(Json{{"type", "close"}}, n_steps);
    if (bye.value("type", "") != "close") throw TransportError(n_steps, "close was not acknowledged");
    return out;
}

}  // namespace arsim
