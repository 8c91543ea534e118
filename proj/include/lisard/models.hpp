#pragma once
// Backbone registry behind the ClassifierModel interface: a desk-scale CNN
// for fast experiments plus the standard backbones configured for 32x32 and
// 64x64 inputs. Also weight serialization with checksummed manifests.

#include <filesystem>
#include <map>
#include <sstream>

#include <json.hpp>

#include "lisard/layers.hpp"

namespace lisard {

using json = nlohmann::json;

struct BackboneSpec {
    std::string name;
    long num_classes = 10;
    std::array<long, 3> input_spec = {3, 32, 32};  // C,H,W
    std::uint64_t init_seed = 0;

    bool operator==(const BackboneSpec& o) const {
        return name == o.name && num_classes == o.num_classes && input_spec == o.input_spec;
    }
};

inline void to_json(json& j, const BackboneSpec& s) {
    j = json{{"name", s.name},
             {"num_classes", s.num_classes},
             {"input", {s.input_spec[0], s.input_spec[1], s.input_spec[2]}},
             {"init_seed", s.init_seed}};
}

inline void from_json(const json& j, BackboneSpec& s) {
    j.at("name").get_to(s.name);
    j.at("num_classes").get_to(s.num_classes);
    auto in = j.at("input");
    s.input_spec = {in.at(0).get<long>(), in.at(1).get<long>(), in.at(2).get<long>()};
    s.init_seed = j.value("init_seed", std::uint64_t{0});
}

// Gradient-capable extension of the inference interface. Training and attack
// generation require it; evaluation code never does.
class DifferentiableModel : public ClassifierModel {
public:
    virtual ForwardResult forward_full_taped(const ImageBatch& x, Tape& tape) = 0;

    // glogits is dL/dlogits (B,K); gembed is dL/dembedding (B,E) or an empty
    // tensor. Accumulates parameter gradients and returns dL/dinput.
    virtual Tensor backward_full(const Tensor& glogits, const Tensor& gembed,
                                 const Tape& tape) = 0;

    virtual std::vector<Param*> params() = 0;
    virtual void zero_grad() = 0;
    virtual NamedState state() = 0;
    virtual const BackboneSpec& spec() const = 0;
};

// Feature extractor + linear classification head. The embedding handed out
// is exactly the tensor entering the head.
class NetworkModel : public DifferentiableModel {
public:
    NetworkModel(BackboneSpec spec, std::unique_ptr<Sequential> features)
        : spec_(std::move(spec)), features_(std::move(features)) {
        std::vector<long> feat_shape = features_->out_shape(
            {spec_.input_spec[0], spec_.input_spec[1], spec_.input_spec[2]});
        require(feat_shape.size() == 1,
                "backbone features must end in a flat embedding, got rank " +
                    std::to_string(feat_shape.size()));
        embedding_width_ = feat_shape[0];
        require(embedding_width_ >= 2, "embedding width must be >= 2");
        head_ = std::make_unique<Linear>(embedding_width_, spec_.num_classes);
        std::uint64_t counter = 0;
        features_->init_params(spec_.init_seed, counter);
        head_->init_params(spec_.init_seed, counter);
    }

    void set_mode(Mode m) override { mode_ = m; }
    Mode mode() const override { return mode_; }
    long num_classes() const override { return spec_.num_classes; }
    long embedding_width() const override { return embedding_width_; }
    std::array<long, 3> input_spec() const override { return spec_.input_spec; }
    const BackboneSpec& spec() const override { return spec_; }

    ForwardResult forward_full(const ImageBatch& x) override {
        check_input_shape(*this, x);
        Tensor z = features_->forward(x.data, mode_, nullptr);
        Tensor logits = head_->forward(z, mode_, nullptr);
        return {EmbeddingBatch(std::move(z)), LogitBatch(std::move(logits))};
    }

    ForwardResult forward_full_taped(const ImageBatch& x, Tape& tape) override {
        check_input_shape(*this, x);
        tape.mode = mode_;
        Tensor z = features_->forward(x.data, mode_, &tape);
        Tensor logits = head_->forward(z, mode_, &tape);
        return {EmbeddingBatch(std::move(z)), LogitBatch(std::move(logits))};
    }

    Tensor backward_full(const Tensor& glogits, const Tensor& gembed, const Tape& tape) override {
        Tensor gz = head_->backward(glogits, tape);
        if (!gembed.empty()) {
            require(gz.same_shape(gembed), "backward_full: embedding gradient shape mismatch");
            for (long i = 0; i < gz.numel(); ++i) gz[i] += gembed[i];
        }
        return features_->backward(gz, tape);
    }

    std::vector<Param*> params() override {
        std::vector<Param*> out;
        features_->collect_params(out);
        head_->collect_params(out);
        return out;
    }

    void zero_grad() override {
        for (Param* p : params()) {
            p->ensure_grad();
            p->grad.zero();
        }
    }

    NamedState state() override {
        NamedState out;
        features_->collect_state("features.", out);
        head_->collect_state("head.", out);
        return out;
    }

private:
    BackboneSpec spec_;
    std::unique_ptr<Sequential> features_;
    std::unique_ptr<Linear> head_;
    long embedding_width_ = 0;
    Mode mode_ = Mode::train;
};

// ---------------------------------------------------------------------------
// Backbone builders

namespace backbones {

inline void add_conv_bn_relu(Sequential& s, long in, long out, long k, long stride, long pad) {
    s.emplace<Conv2d>(in, out, k, stride, pad, false);
    s.emplace<BatchNorm2d>(out);
    s.emplace<ReLU>();
}

inline std::unique_ptr<Layer> basic_block(long in, long out, long stride) {
    auto main = std::make_unique<Sequential>();
    main->emplace<Conv2d>(in, out, 3, stride, 1, false);
    main->emplace<BatchNorm2d>(out);
    main->emplace<ReLU>();
    main->emplace<Conv2d>(out, out, 3, 1, 1, false);
    main->emplace<BatchNorm2d>(out);
    std::unique_ptr<Layer> shortcut;
    if (stride != 1 || in != out) {
        auto sc = std::make_unique<Sequential>();
        sc->emplace<Conv2d>(in, out, 1, stride, 0, false);
        sc->emplace<BatchNorm2d>(out);
        shortcut = std::move(sc);
    }
    return std::make_unique<ResidualBlock>(std::move(main), std::move(shortcut), true);
}

inline std::unique_ptr<Layer> bottleneck_block(long in, long mid, long out, long stride) {
    auto main = std::make_unique<Sequential>();
    main->emplace<Conv2d>(in, mid, 1, 1, 0, false);
    main->emplace<BatchNorm2d>(mid);
    main->emplace<ReLU>();
    main->emplace<Conv2d>(mid, mid, 3, stride, 1, false);
    main->emplace<BatchNorm2d>(mid);
    main->emplace<ReLU>();
    main->emplace<Conv2d>(mid, out, 1, 1, 0, false);
    main->emplace<BatchNorm2d>(out);
    std::unique_ptr<Layer> shortcut;
    if (stride != 1 || in != out) {
        auto sc = std::make_unique<Sequential>();
        sc->emplace<Conv2d>(in, out, 1, stride, 0, false);
        sc->emplace<BatchNorm2d>(out);
        shortcut = std::move(sc);
    }
    return std::make_unique<ResidualBlock>(std::move(main), std::move(shortcut), true);
}

inline std::unique_ptr<Layer> preact_block(long in, long out, long stride) {
    auto main = std::make_unique<Sequential>();
    main->emplace<BatchNorm2d>(in);
    main->emplace<ReLU>();
    main->emplace<Conv2d>(in, out, 3, stride, 1, false);
    main->emplace<BatchNorm2d>(out);
    main->emplace<ReLU>();
    main->emplace<Conv2d>(out, out, 3, 1, 1, false);
    std::unique_ptr<Layer> shortcut;
    if (stride != 1 || in != out) {
        shortcut = std::make_unique<Conv2d>(in, out, 1, stride, 0, false);
    }
    return std::make_unique<ResidualBlock>(std::move(main), std::move(shortcut), false);
}

inline std::unique_ptr<Layer> inverted_residual(long in, long out, long stride, long expand) {
    const long mid = in * expand;
    auto main = std::make_unique<Sequential>();
    if (expand != 1) {
        main->emplace<Conv2d>(in, mid, 1, 1, 0, false);
        main->emplace<BatchNorm2d>(mid);
        main->emplace<ReLU6>();
    }
    main->emplace<DepthwiseConv2d>(mid, 3, stride, 1);
    main->emplace<BatchNorm2d>(mid);
    main->emplace<ReLU6>();
    main->emplace<Conv2d>(mid, out, 1, 1, 0, false);
    main->emplace<BatchNorm2d>(out);
    bool use_res = stride == 1 && in == out;
    if (!use_res) return main;
    return std::make_unique<ResidualBlock>(std::move(main), nullptr, false);
}

inline std::unique_ptr<Layer> mbconv_block(long in, long out, long stride, long expand) {
    const long mid = in * expand;
    auto main = std::make_unique<Sequential>();
    if (expand != 1) {
        main->emplace<Conv2d>(in, mid, 1, 1, 0, false);
        main->emplace<BatchNorm2d>(mid);
        main->emplace<Swish>();
    }
    main->emplace<DepthwiseConv2d>(mid, 3, stride, 1);
    main->emplace<BatchNorm2d>(mid);
    main->emplace<Swish>();
    main->emplace<SEBlock>(mid, std::max<long>(1, in / 4));
    main->emplace<Conv2d>(mid, out, 1, 1, 0, false);
    main->emplace<BatchNorm2d>(out);
    bool use_res = stride == 1 && in == out;
    if (!use_res) return main;
    return std::make_unique<ResidualBlock>(std::move(main), nullptr, false);
}

// Desk-scale backbone: three strided conv blocks, E = 64, ~38k parameters.
inline std::unique_ptr<Sequential> toycnn(const BackboneSpec&) {
    auto s = std::make_unique<Sequential>();
    add_conv_bn_relu(*s, 3, 24, 3, 2, 1);
    add_conv_bn_relu(*s, 24, 48, 3, 2, 1);
    add_conv_bn_relu(*s, 48, 64, 3, 2, 1);
    s->emplace<GlobalAvgPool>();
    return s;
}

inline std::unique_ptr<Sequential> resnet(const std::vector<long>& blocks,
                                          bool bottleneck) {
    auto s = std::make_unique<Sequential>();
    // 3x3 stem without max-pool: the small-input adaptation.
    add_conv_bn_relu(*s, 3, 64, 3, 1, 1);
    const long expansion = bottleneck ? 4 : 1;
    long in = 64;
    long width = 64;
    for (std::size_t stage = 0; stage < blocks.size(); ++stage) {
        long stride = stage == 0 ? 1 : 2;
        for (long b = 0; b < blocks[stage]; ++b) {
            long s_b = b == 0 ? stride : 1;
            if (bottleneck) {
                s->add(bottleneck_block(in, width, width * expansion, s_b));
                in = width * expansion;
            } else {
                s->add(basic_block(in, width, s_b));
                in = width;
            }
        }
        width *= 2;
    }
    s->emplace<GlobalAvgPool>();
    return s;
}

inline std::unique_ptr<Sequential> wideresnet28_10() {
    auto s = std::make_unique<Sequential>();
    s->emplace<Conv2d>(3, 16, 3, 1, 1, false);
    const long n = 4;  // depth 28 = 6n + 4
    long in = 16;
    for (long width : {160L, 320L, 640L}) {
        long stride = width == 160 ? 1 : 2;
        for (long b = 0; b < n; ++b) {
            s->add(preact_block(in, width, b == 0 ? stride : 1));
            in = width;
        }
    }
    s->emplace<BatchNorm2d>(640);
    s->emplace<ReLU>();
    s->emplace<GlobalAvgPool>();
    return s;
}

inline std::unique_ptr<Sequential> vgg19() {
    const std::vector<long> cfg = {64, 64,  -1, 128, 128, -1, 256, 256, 256, 256, -1,
                                   512, 512, 512, 512, -1, 512, 512, 512, 512, -1};
    auto s = std::make_unique<Sequential>();
    long in = 3;
    for (long c : cfg) {
        if (c == -1) {
            s->emplace<MaxPool2d>(2, 2);
        } else {
            add_conv_bn_relu(*s, in, c, 3, 1, 1);
            in = c;
        }
    }
    s->emplace<Flatten>();
    return s;
}

inline std::unique_ptr<Sequential> mobilenetv2() {
    auto s = std::make_unique<Sequential>();
    s->emplace<Conv2d>(3, 32, 3, 1, 1, false);
    s->emplace<BatchNorm2d>(32);
    s->emplace<ReLU6>();
    // (expand, out, repeats, first stride); strides for small inputs.
    const long cfg[][4] = {{1, 16, 1, 1}, {6, 24, 2, 1}, {6, 32, 3, 2}, {6, 64, 4, 2},
                           {6, 96, 3, 1}, {6, 160, 3, 2}, {6, 320, 1, 1}};
    long in = 32;
    for (auto& row : cfg) {
        for (long r = 0; r < row[2]; ++r) {
            s->add(inverted_residual(in, row[1], r == 0 ? row[3] : 1, row[0]));
            in = row[1];
        }
    }
    s->emplace<Conv2d>(in, 1280, 1, 1, 0, false);
    s->emplace<BatchNorm2d>(1280);
    s->emplace<ReLU6>();
    s->emplace<GlobalAvgPool>();
    return s;
}

inline std::unique_ptr<Sequential> efficientnetb2(const BackboneSpec& spec) {
    auto s = std::make_unique<Sequential>();
    const long stem_stride = spec.input_spec[1] <= 32 ? 1 : 2;
    s->emplace<Conv2d>(3, 32, 3, stem_stride, 1, false);
    s->emplace<BatchNorm2d>(32);
    s->emplace<Swish>();
    // (expand, out, repeats, first stride), B2 widths and depths.
    const long cfg[][4] = {{1, 16, 2, 1},  {6, 24, 3, 2},  {6, 48, 3, 2}, {6, 88, 4, 2},
                           {6, 120, 4, 1}, {6, 208, 5, 2}, {6, 352, 2, 1}};
    long in = 32;
    for (auto& row : cfg) {
        for (long r = 0; r < row[2]; ++r) {
            s->add(mbconv_block(in, row[1], r == 0 ? row[3] : 1, row[0]));
            in = row[1];
        }
    }
    s->emplace<Conv2d>(in, 1408, 1, 1, 0, false);
    s->emplace<BatchNorm2d>(1408);
    s->emplace<Swish>();
    s->emplace<GlobalAvgPool>();
    return s;
}

}  // namespace backbones

using BackboneBuilder = std::function<std::unique_ptr<Sequential>(const BackboneSpec&)>;

inline const std::map<std::string, BackboneBuilder>& backbone_registry() {
    static const std::map<std::string, BackboneBuilder> registry = {
        {"toycnn", [](const BackboneSpec& s) { return backbones::toycnn(s); }},
        {"resnet18", [](const BackboneSpec&) { return backbones::resnet({2, 2, 2, 2}, false); }},
        {"resnet50", [](const BackboneSpec&) { return backbones::resnet({3, 4, 6, 3}, true); }},
        {"resnet101", [](const BackboneSpec&) { return backbones::resnet({3, 4, 23, 3}, true); }},
        {"wideresnet28-10", [](const BackboneSpec&) { return backbones::wideresnet28_10(); }},
        {"vgg19", [](const BackboneSpec&) { return backbones::vgg19(); }},
        {"mobilenetv2", [](const BackboneSpec&) { return backbones::mobilenetv2(); }},
        {"efficientnetb2", [](const BackboneSpec& s) { return backbones::efficientnetb2(s); }},
    };
    return registry;
}

inline std::vector<std::string> registered_backbones() {
    std::vector<std::string> names;
    for (auto& [name, _] : backbone_registry()) names.push_back(name);
    return names;
}

inline std::unique_ptr<DifferentiableModel> build(const BackboneSpec& spec) {
    auto it = backbone_registry().find(spec.name);
    if (it == backbone_registry().end()) {
        std::string known;
        for (auto& n : registered_backbones()) known += (known.empty() ? "" : ", ") + n;
        throw RegistryError("unknown backbone '" + spec.name + "'; known backbones: " + known);
    }
    require(spec.num_classes >= 2, "build: num_classes must be >= 2");
    return std::make_unique<NetworkModel>(spec, it->second(spec));
}

// ---------------------------------------------------------------------------
// Tensor map serialization and weight files

namespace detail {

constexpr char kWeightsMagic[8] = {'L', 'S', 'R', 'D', 'W', 'T', '0', '1'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("unexpected end of tensor-map stream");
    return v;
}

}  // namespace detail

inline void write_tensor_map(std::ostream& os, const NamedState& state) {
    os.write(detail::kWeightsMagic, sizeof(detail::kWeightsMagic));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(state.size()));
    for (auto& [name, tensor] : state) {
        detail::write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(tensor->rank()));
        for (int d = 0; d < tensor->rank(); ++d)
            detail::write_pod<std::int64_t>(os, tensor->dim(d));
        os.write(reinterpret_cast<const char*>(tensor->data()),
                 static_cast<std::streamsize>(sizeof(float) * tensor->numel()));
    }
}

inline std::map<std::string, Tensor> read_tensor_map(std::istream& is) {
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kWeightsMagic, 8) != 0)
        throw IoError("bad tensor-map magic");
    auto count = detail::read_pod<std::uint32_t>(is);
    std::map<std::string, Tensor> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        auto name_len = detail::read_pod<std::uint16_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        auto rank = detail::read_pod<std::uint32_t>(is);
        std::vector<long> shape(rank);
        for (auto& d : shape) d = static_cast<long>(detail::read_pod<std::int64_t>(is));
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(sizeof(float) * t.numel()));
        if (!is) throw IoError("truncated tensor-map stream at tensor " + name);
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

// Deterministic fingerprint of the full model state.
inline std::string model_state_sha256(DifferentiableModel& model) {
    std::ostringstream os(std::ios::binary);
    NamedState st = model.state();
    write_tensor_map(os, st);
    std::string bytes = os.str();
    return sha256_hex(bytes.data(), bytes.size());
}

// Weight file = tensor map; sidecar JSON manifest carries the backbone spec,
// the training-config hash and a content checksum.
inline void save_weights(DifferentiableModel& model, const std::string& path,
                         const std::string& train_config_hash = "") {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open weight file for writing: " + path);
        NamedState st = model.state();
        write_tensor_map(os, st);
    }
    json manifest;
    manifest["format"] = "lisard-weights-v1";
    manifest["backbone"] = model.spec();
    manifest["checksum"] = sha256_file_hex(path);
    manifest["train_config_hash"] = train_config_hash;
    manifest["created"] = iso8601_utc_now();
    std::ofstream ms(path + ".json", std::ios::trunc);
    if (!ms) throw IoError("cannot open weight manifest for writing: " + path + ".json");
    ms << manifest.dump(2) << '\n';
}

inline json read_weight_manifest(const std::string& path) {
    std::ifstream ms(path + ".json");
    if (!ms) throw IoError("missing weight manifest: " + path + ".json");
    json manifest;
    ms >> manifest;
    return manifest;
}

inline std::string weights_checksum(const std::string& path) {
    return read_weight_manifest(path).at("checksum").get<std::string>();
}

inline std::unique_ptr<DifferentiableModel> load_weights(const std::string& path,
                                                         const BackboneSpec* expected = nullptr) {
    json manifest = read_weight_manifest(path);
    BackboneSpec stored = manifest.at("backbone").get<BackboneSpec>();
    if (expected && !(stored == *expected)) {
        throw IoError("weight file spec mismatch for " + path + ": stored backbone '" +
                      stored.name + "' K=" + std::to_string(stored.num_classes) +
                      " does not match requested '" + expected->name +
                      "' K=" + std::to_string(expected->num_classes));
    }
    std::string checksum = manifest.at("checksum").get<std::string>();
    if (sha256_file_hex(path) != checksum) {
        throw IoError("weight file checksum mismatch: " + path);
    }
    auto model = build(stored);
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open weight file: " + path);
    auto tensors = read_tensor_map(is);
    NamedState st = model->state();
    require(tensors.size() == st.size(), "weight file tensor count mismatch: " + path);
    for (auto& [name, dst] : st) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw IoError("weight file missing tensor '" + name + "'");
        require(it->second.shape() == dst->shape(),
                "weight tensor shape mismatch for '" + name + "'");
        *dst = it->second;
    }
    return model;
}

}  // namespace lisard
