#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "dsa/core/ops.hpp"

namespace dsa {

enum class Family { convnet, mlp, lenet };
enum class Activation { relu, leakyrelu, sigmoid };
enum class Norm { instance, batch, layer, group, none };
enum class Pooling { avg, max, none };

inline const char* name_of(Family f)
{
    switch (f) {
    case Family::convnet: return "convnet";
    case Family::mlp: return "mlp";
    case Family::lenet: return "lenet";
    }
    return "?";
}

inline const char* name_of(Activation a)
{
    switch (a) {
    case Activation::relu: return "relu";
    case Activation::leakyrelu: return "leakyrelu";
    case Activation::sigmoid: return "sigmoid";
    }
    return "?";
}

inline const char* name_of(Norm n)
{
    switch (n) {
    case Norm::instance: return "instance";
    case Norm::batch: return "batch";
    case Norm::layer: return "layer";
    case Norm::group: return "group";
    case Norm::none: return "none";
    }
    return "?";
}

inline const char* name_of(Pooling p)
{
    switch (p) {
    case Pooling::avg: return "avg";
    case Pooling::max: return "max";
    case Pooling::none: return "none";
    }
    return "?";
}

template <typename E>
E parse_enum(const std::string& s, std::initializer_list<E> all, const char* what)
{
    for (E e : all)
        if (s == name_of(e)) return e;
    throw ConfigError(std::string("unknown ") + what + " '" + s + "'");
}

inline Family parse_family(const std::string& s)
{
    return parse_enum(s, {Family::convnet, Family::mlp, Family::lenet}, "architecture family");
}
inline Activation parse_activation(const std::string& s)
{
    return parse_enum(s, {Activation::relu, Activation::leakyrelu, Activation::sigmoid}, "activation");
}
inline Norm parse_norm(const std::string& s)
{
    return parse_enum(s, {Norm::instance, Norm::batch, Norm::layer, Norm::group, Norm::none}, "normalization");
}
inline Pooling parse_pooling(const std::string& s)
{
    return parse_enum(s, {Pooling::avg, Pooling::max, Pooling::none}, "pooling");
}

struct ImageShape {
    int channels = 1;
    int height = 28;
    int width = 28;

    bool operator==(const ImageShape&) const = default;
};

/// Description of one network in the model zoo.
struct ArchSpec {
    Family family = Family::convnet;
    int depth = 3;
    int width = 128;
    Activation activation = Activation::relu;
    Norm norm = Norm::instance;
    Pooling pooling = Pooling::avg;
    ImageShape input;
    int classes = 10;

    static ArchSpec convnet(ImageShape in, int classes, int width = 128, int depth = 3)
    {
        ArchSpec s;
        s.input = in;
        s.classes = classes;
        s.width = width;
        s.depth = depth;
        return s;
    }

    static ArchSpec mlp(ImageShape in, int classes, int hidden = 128)
    {
        ArchSpec s;
        s.family = Family::mlp;
        s.input = in;
        s.classes = classes;
        s.width = hidden;
        s.depth = 2;
        s.norm = Norm::none;
        s.pooling = Pooling::none;
        return s;
    }

    static ArchSpec lenet(ImageShape in, int classes)
    {
        ArchSpec s;
        s.family = Family::lenet;
        s.input = in;
        s.classes = classes;
        s.depth = 2;
        s.width = 6;
        s.norm = Norm::none;
        s.pooling = Pooling::max;
        return s;
    }

    std::string name() const
    {
        if (family == Family::mlp) return "MLP-w" + std::to_string(width) + "-" + name_of(activation);
        if (family == Family::lenet) return "LeNet";
        return "ConvNet-d" + std::to_string(depth) + "w" + std::to_string(width) + "-" + name_of(activation) + "-"
               + name_of(norm) + "-" + name_of(pooling);
    }

    std::map<std::string, std::string> to_kv() const
    {
        return {{"family", name_of(family)},
                {"depth", std::to_string(depth)},
                {"width", std::to_string(width)},
                {"activation", name_of(activation)},
                {"norm", name_of(norm)},
                {"pooling", name_of(pooling)},
                {"channels", std::to_string(input.channels)},
                {"height", std::to_string(input.height)},
                {"image_width", std::to_string(input.width)},
                {"classes", std::to_string(classes)}};
    }

    /// Applies the keys present in `kv`; keys outside this set are rejected.
    void apply_kv(const std::map<std::string, std::string>& kv)
    {
        for (const auto& [k, v] : kv) {
            try {
                if (k == "family") family = parse_family(v);
                else if (k == "depth") depth = std::stoi(v);
                else if (k == "width") width = std::stoi(v);
                else if (k == "activation") activation = parse_activation(v);
                else if (k == "norm") norm = parse_norm(v);
                else if (k == "pooling") pooling = parse_pooling(v);
                else if (k == "channels") input.channels = std::stoi(v);
                else if (k == "height") input.height = std::stoi(v);
                else if (k == "image_width") input.width = std::stoi(v);
                else if (k == "classes") classes = std::stoi(v);
                else throw ConfigError("unknown architecture key '" + k + "'");
            } catch (const std::logic_error&) {
                throw ConfigError("invalid value '" + v + "' for architecture key '" + k + "'");
            }
        }
    }

    bool operator==(const ArchSpec&) const = default;
};

/// Spatial size after the ConvNet blocks; throws on collapse below 1x1.
inline std::pair<int, int> convnet_feature_size(const ArchSpec& s)
{
    int h = s.input.height, w = s.input.width;
    for (int d = 0; d < s.depth; ++d) {
        if (s.pooling != Pooling::none) {
            if (h < 2 || w < 2)
                throw ShapeError("spatial collapse: block " + std::to_string(d + 1) + " of " + s.name() + " pools a "
                                 + std::to_string(h) + "x" + std::to_string(w) + " map");
            h /= 2;
            w /= 2;
        }
    }
    return {h, w};
}

inline void validate(const ArchSpec& s)
{
    if (s.classes < 1 || s.input.channels < 1 || s.input.height < 1 || s.input.width < 1)
        throw ConfigError("architecture: class count and input shape must be positive");
    if (s.width < 1 || (s.family == Family::convnet && s.depth < 1))
        throw ConfigError("architecture: depth and width must be positive");
    if (s.family == Family::convnet) {
        convnet_feature_size(s);
        if (s.norm == Norm::group && s.width % 4 != 0)
            throw ConfigError("architecture: group norm needs width divisible by 4");
    }
    if (s.family == Family::lenet) {
        const int pad = s.input.channels == 1 ? 2 : 0;
        const int h = (s.input.height + 2 * pad - 4) / 2 - 4, w = (s.input.width + 2 * pad - 4) / 2 - 4;
        if (h < 2 || w < 2) throw ShapeError("spatial collapse: LeNet input too small " + std::to_string(s.input.height));
    }
}

/// Grouped weight gradients: one matrix per conv/linear layer, row i = flattened gradient of
/// the weights feeding output node i.
template <typename T>
struct GradSet {
    std::vector<Var<T>> layers;

    std::size_t layer_count() const { return layers.size(); }
    std::size_t node_count() const
    {
        std::size_t n = 0;
        for (const auto& l : layers) n += static_cast<std::size_t>(l.shape()[0]);
        return n;
    }
};

/// A model-zoo network. Parameters are graph leaves; forward builds a fresh graph per call.
template <typename T>
class Network {
public:
    enum class Op { conv, bias, norm, batchnorm, act, avgpool, maxpool, flatten, linear };

    struct Layer {
        Op op;
        int p0 = -1, p1 = -1;  // parameter indices (weight/gamma, bias/beta)
        int stride = 1, pad = 0, groups = 1;
        std::size_t bn_slot = 0;
    };

    explicit Network(ArchSpec spec)
      : spec_(std::move(spec))
    {
        validate(spec_);
        switch (spec_.family) {
        case Family::convnet: build_convnet(); break;
        case Family::mlp: build_mlp(); break;
        case Family::lenet: build_lenet(); break;
        }
    }

    const ArchSpec& spec() const { return spec_; }
    std::vector<Var<T>>& parameters() { return params_; }
    const std::vector<Var<T>>& parameters() const { return params_; }
    const std::vector<Layer>& layers() const { return layers_; }

    /// Conv/linear weight tensors in layer order (the operands of the matching distance).
    std::vector<Var<T>> weights() const
    {
        std::vector<Var<T>> out;
        for (int i : weight_index_) out.push_back(params_[static_cast<std::size_t>(i)]);
        return out;
    }
    const std::vector<int>& weight_indices() const { return weight_index_; }

    /// Tensors entering the matching distance: weights, plus normalization scale/shift on request.
    std::vector<Var<T>> matched_parameters(bool include_affine) const
    {
        if (!include_affine) return weights();
        std::vector<Var<T>> out;
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (role_[i] != Role::bias) out.push_back(params_[i]);
        return out;
    }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value().size();
        return n;
    }

    void train(bool on) { training_ = on; }
    bool training() const { return training_; }

    Var<T> forward(const Var<T>& x)
    {
        const ImageShape& in = spec_.input;
        if (x.value().rank() != 4 || x.shape()[1] != in.channels || x.shape()[2] != in.height || x.shape()[3] != in.width)
            throw ShapeError(spec_.name() + ": input " + to_string(x.shape()) + " does not match "
                             + to_string(Shape{-1, in.channels, in.height, in.width}));
        Var<T> h = x;
        for (const Layer& l : layers_) {
            switch (l.op) {
            case Op::conv: h = conv2d(h, param(l.p0), l.stride, l.pad); break;
            case Op::bias:
                h = add(h, h.value().rank() == 4 ? reshape(param(l.p0), Shape{1, param(l.p0).shape()[0], 1, 1}) : param(l.p0));
                break;
            case Op::norm: h = group_norm(h, l.groups, param(l.p0), param(l.p1), eps_); break;
            case Op::batchnorm: h = batchnorm(h, l); break;
            case Op::act: h = activate(h); break;
            case Op::avgpool: h = avgpool2d(h, 2, 2); break;
            case Op::maxpool: h = maxpool2d(h, 2, 2); break;
            case Op::flatten: h = flatten(h); break;
            case Op::linear: h = linear(h, param(l.p0), Var<T>{}); break;
            }
        }
        return h;
    }

    /// Conv/linear weights ~ N(0, 2/fan_in); biases zero; norm scale one, shift zero.
    void kaiming_init(std::mt19937_64& rng)
    {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor<T>& t = params_[i].mutable_value();
            switch (role_[i]) {
            case Role::weight: {
                const auto& s = t.shape();
                const std::size_t fan_in = t.size() / static_cast<std::size_t>(s[0]);
                std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
                for (auto& v : t.vec()) v = static_cast<T>(nd(rng));
                break;
            }
            case Role::bias:
            case Role::shift: std::fill(t.vec().begin(), t.vec().end(), T(0)); break;
            case Role::scale: std::fill(t.vec().begin(), t.vec().end(), T(1)); break;
            }
        }
        for (auto& bn : bn_state_) {
            std::fill(bn.mean.begin(), bn.mean.end(), T(0));
            std::fill(bn.var.begin(), bn.var.end(), T(1));
        }
    }

private:
    enum class Role { weight, bias, scale, shift };

    struct BnState {
        std::vector<T> mean, var;
    };

    const Var<T>& param(int i) const { return params_[static_cast<std::size_t>(i)]; }

    int add_param(Shape s, Role r)
    {
        params_.push_back(Var<T>::leaf(Tensor<T>(std::move(s))));
        role_.push_back(r);
        if (r == Role::weight) weight_index_.push_back(static_cast<int>(params_.size() - 1));
        return static_cast<int>(params_.size() - 1);
    }

    void add_conv(int in, int out, int k, int pad)
    {
        const int w = add_param(Shape{out, in, k, k}, Role::weight);
        layers_.push_back({Op::conv, w, -1, 1, pad});
        layers_.push_back({Op::bias, add_param(Shape{out}, Role::bias)});
    }

    void add_linear(int in, int out)
    {
        layers_.push_back({Op::linear, add_param(Shape{out, in}, Role::weight)});
        layers_.push_back({Op::bias, add_param(Shape{out}, Role::bias)});
    }

    void add_norm(int channels)
    {
        if (spec_.norm == Norm::none) return;
        const int g = add_param(Shape{channels}, Role::scale);
        const int b = add_param(Shape{channels}, Role::shift);
        if (spec_.norm == Norm::batch) {
            Layer l{Op::batchnorm, g, b};
            l.bn_slot = bn_state_.size();
            bn_state_.push_back({std::vector<T>(channels, T(0)), std::vector<T>(channels, T(1))});
            layers_.push_back(l);
            return;
        }
        Layer l{Op::norm, g, b};
        l.groups = spec_.norm == Norm::instance ? channels : spec_.norm == Norm::layer ? 1 : 4;
        layers_.push_back(l);
    }

    void add_pool()
    {
        if (spec_.pooling == Pooling::avg) layers_.push_back({Op::avgpool});
        else if (spec_.pooling == Pooling::max) layers_.push_back({Op::maxpool});
    }

    void build_convnet()
    {
        int c = spec_.input.channels;
        for (int d = 0; d < spec_.depth; ++d) {
            add_conv(c, spec_.width, 3, 1);
            add_norm(spec_.width);
            layers_.push_back({Op::act});
            add_pool();
            c = spec_.width;
        }
        const auto [h, w] = convnet_feature_size(spec_);
        layers_.push_back({Op::flatten});
        add_linear(spec_.width * h * w, spec_.classes);
    }

    void build_mlp()
    {
        const ImageShape& in = spec_.input;
        layers_.push_back({Op::flatten});
        add_linear(in.channels * in.height * in.width, spec_.width);
        layers_.push_back({Op::act});
        add_linear(spec_.width, spec_.width);
        layers_.push_back({Op::act});
        add_linear(spec_.width, spec_.classes);
    }

    void build_lenet()
    {
        const ImageShape& in = spec_.input;
        const int pad = in.channels == 1 ? 2 : 0;
        add_conv(in.channels, 6, 5, pad);
        layers_.push_back({Op::act});
        layers_.push_back({Op::maxpool});
        add_conv(6, 16, 5, 0);
        layers_.push_back({Op::act});
        layers_.push_back({Op::maxpool});
        const int h = ((in.height + 2 * pad - 4) / 2 - 4) / 2;
        const int w = ((in.width + 2 * pad - 4) / 2 - 4) / 2;
        layers_.push_back({Op::flatten});
        add_linear(16 * h * w, 120);
        layers_.push_back({Op::act});
        add_linear(120, 84);
        layers_.push_back({Op::act});
        add_linear(84, spec_.classes);
    }

    Var<T> activate(const Var<T>& h) const
    {
        switch (spec_.activation) {
        case Activation::relu: return relu(h);
        case Activation::leakyrelu: return leaky_relu(h, T(0.01));
        case Activation::sigmoid: return sigmoid(h);
        }
        return h;
    }

    Var<T> batchnorm(const Var<T>& h, const Layer& l)
    {
        BnState& st = bn_state_[l.bn_slot];
        const int c = h.shape()[1];
        if (training_) {
            std::vector<T> m, v;
            Var<T> y = batch_norm_train(h, param(l.p0), param(l.p1), eps_, m, v);
            const double count = static_cast<double>(h.value().size() / static_cast<std::size_t>(c));
            const double unbias = count > 1 ? count / (count - 1) : 1.0;
            for (int i = 0; i < c; ++i) {
                st.mean[i] = static_cast<T>(0.9 * st.mean[i] + 0.1 * m[i]);
                st.var[i] = static_cast<T>(0.9 * st.var[i] + 0.1 * v[i] * unbias);
            }
            return y;
        }
        Tensor<T> shift(Shape{1, c, 1, 1}), mult(Shape{1, c, 1, 1});
        for (int i = 0; i < c; ++i) {
            shift[i] = st.mean[i];
            mult[i] = T(1) / std::sqrt(st.var[i] + eps_);
        }
        Var<T> y = mul(sub(h, Var<T>::constant(shift)), Var<T>::constant(mult));
        return add(mul(y, reshape(param(l.p0), Shape{1, c, 1, 1})), reshape(param(l.p1), Shape{1, c, 1, 1}));
    }

    ArchSpec spec_;
    std::vector<Var<T>> params_;
    std::vector<Role> role_;
    std::vector<int> weight_index_;
    std::vector<Layer> layers_;
    std::vector<BnState> bn_state_;
    bool training_ = true;
    T eps_ = T(1e-5);
};

template <typename T>
Network<T> build(const ArchSpec& spec)
{
    return Network<T>(spec);
}

/// Row grouping for matched tensors: a rank-k tensor with O leading entries becomes O rows; a
/// vector becomes one row.
template <typename T>
GradSet<T> group_rows(const std::vector<Var<T>>& params, const std::vector<Var<T>>& grads)
{
    if (grads.size() != params.size())
        throw Error("per_node_grad_groups: expected " + std::to_string(params.size()) + " layer gradients, got "
                    + std::to_string(grads.size()));
    GradSet<T> out;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!grads[i].defined()) throw Error("per_node_grad_groups: missing gradient for layer " + std::to_string(i));
        if (grads[i].shape() != params[i].shape())
            throw ShapeError("per_node_grad_groups: layer " + std::to_string(i) + " gradient " + to_string(grads[i].shape())
                             + " vs weight " + to_string(params[i].shape()));
        const int n = static_cast<int>(params[i].value().size());
        const int rows = params[i].value().rank() >= 2 ? params[i].shape()[0] : 1;
        out.layers.push_back(reshape(grads[i], Shape{rows, n / rows}));
    }
    return out;
}

/// Splits per-layer weight gradients into per-output-node rows. `grads` is index-aligned with
/// net.weights(); biases never appear here.
template <typename T>
GradSet<T> per_node_grad_groups(const Network<T>& net, const std::vector<Var<T>>& grads)
{
    return group_rows(net.weights(), grads);
}

/// Gradient of the mean cross-entropy of `net` on (x, labels), grouped per node. With
/// `include_affine` the normalization scale and shift vectors are appended, one row each.
template <typename T>
GradSet<T> weight_gradients(Network<T>& net, const Var<T>& x, const std::vector<int>& labels, bool create_graph,
                            bool include_affine = false)
{
    const auto params = net.matched_parameters(include_affine);
    Var<T> loss = softmax_cross_entropy(net.forward(x), labels);
    auto g = gradient(loss, params, create_graph);
    return group_rows(params, g.values);
}

} // namespace dsa
