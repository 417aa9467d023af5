#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace cacs {

// Dense row-major tensor, up to 4 axes (batch, channel, height, width).
// 64-bit reals throughout; desk-scale sizes make speed a non-issue and the
// finite-difference checks need the precision.
struct Tensor {
    int n = 1, c = 1, h = 1, w = 1;
    std::vector<double> v;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_, double fill = 0.0)
        : n(n_), c(c_), h(h_), w(w_),
          v(static_cast<size_t>(n_) * c_ * h_ * w_, fill) {}

    static Tensor vec(int len, double fill = 0.0) { return Tensor(len, 1, 1, 1, fill); }
    static Tensor mat(int rows, int cols, double fill = 0.0) {
        return Tensor(rows, cols, 1, 1, fill);
    }

    size_t size() const { return v.size(); }
    size_t plane() const { return static_cast<size_t>(h) * w; }

    double& at(int in, int ic, int ih, int iw) {
        return v[((static_cast<size_t>(in) * c + ic) * h + ih) * w + iw];
    }
    const double& at(int in, int ic, int ih, int iw) const {
        return v[((static_cast<size_t>(in) * c + ic) * h + ih) * w + iw];
    }

    double* data() { return v.data(); }
    const double* data() const { return v.data(); }

    void fill(double value) { std::fill(v.begin(), v.end(), value); }
    bool same_shape(const Tensor& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
};

// Fails with ErrorKind::Compute when the tensor contains NaN or +-Inf.
void check_finite(const Tensor& t, const char* where);

// All learnable parameters plus persistent state (batch-norm running
// statistics) of one network, in declared order. Checkpoints serialize the
// entries in this order.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor value;
        Tensor grad;
        bool trainable = true;
    };

    int add(const std::string& name, Tensor init, bool trainable = true);
    Entry& operator[](int id) { return entries_[id]; }
    const Entry& operator[](int id) const { return entries_[id]; }
    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    void zero_grads();
    size_t trainable_parameter_count() const;

private:
    std::vector<Entry> entries_;
};

// --- layers -----------------------------------------------------------

// 3x3 convolution, stride 1, zero padding 1 ("same" output size).
class Conv3x3 {
public:
    Conv3x3(int in_ch, int out_ch, int w_id, int b_id)
        : in_ch_(in_ch), out_ch_(out_ch), w_id_(w_id), b_id_(b_id) {}

    Tensor forward(ParamStore& store, const Tensor& x);
    Tensor backward(ParamStore& store, const Tensor& gy);

    int w_id() const { return w_id_; }
    int b_id() const { return b_id_; }

    // Adjoint application of the layer's kernels alone (no bias), used by
    // the saliency back-projection.
    Tensor transposed_apply(const ParamStore& store, const Tensor& g) const;

private:
    int in_ch_, out_ch_;
    int w_id_, b_id_;
    Tensor x_padded_;  // (n, in_ch, h+2, w+2)
    int in_h_ = 0, in_w_ = 0;
};

// 2x2 max pooling, stride 2, floor semantics (odd trailing row/col dropped).
// Backward routes the gradient to the window argmax; ties break to the first
// element in row-major scan order.
class MaxPool2x2 {
public:
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& gy) const;

    // Routes values back through the recorded argmax switches.
    Tensor unpool(const Tensor& g) const { return backward(g); }

    // With frozen switches, forward reads through the previously recorded
    // argmax positions instead of rescanning. Finite-difference checks use
    // this to stay on the piecewise-smooth branch that backprop
    // differentiates; a perturbation-induced argmax flip would otherwise put
    // a kink inside the central difference.
    void set_frozen(bool frozen) { frozen_ = frozen; }

private:
    std::vector<int32_t> argmax_;
    int in_n_ = 0, in_c_ = 0, in_h_ = 0, in_w_ = 0;
    bool frozen_ = false;
};

// Batch normalization. `spatial` normalizes per channel over (batch, h, w)
// for conv maps; otherwise per feature over the batch. Train mode uses the
// biased batch variance and maintains running statistics with unbiased
// variance; inference normalizes with the running statistics.
class BatchNorm {
public:
    BatchNorm(int channels, bool spatial, int gamma_id, int beta_id, int rm_id, int rv_id,
              double eps = 1e-5, double momentum = 0.9)
        : channels_(channels), spatial_(spatial), gamma_id_(gamma_id), beta_id_(beta_id),
          rm_id_(rm_id), rv_id_(rv_id), eps_(eps), momentum_(momentum) {}

    Tensor forward(ParamStore& store, const Tensor& x, bool train);
    Tensor backward(ParamStore& store, const Tensor& gy);

private:
    int channels_;
    bool spatial_;
    int gamma_id_, beta_id_, rm_id_, rv_id_;
    double eps_, momentum_;
    Tensor xhat_;
    std::vector<double> inv_std_;
    size_t group_size_ = 0;
    bool train_mode_ = true;
};

// Exponential linear unit: x for x >= 0, alpha*(exp(x)-1) below.
class Elu {
public:
    explicit Elu(double alpha = 1.0) : alpha_(alpha) {}

    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& gy) const;

    double alpha() const { return alpha_; }

private:
    double alpha_;
    Tensor out_;
};

// Fully connected affine layer; weight shape (out_features, in_features).
class Dense {
public:
    Dense(int in_features, int out_features, int w_id, int b_id)
        : in_(in_features), out_(out_features), w_id_(w_id), b_id_(b_id) {}

    Tensor forward(ParamStore& store, const Tensor& x);
    Tensor backward(ParamStore& store, const Tensor& gy);

    int w_id() const { return w_id_; }
    int b_id() const { return b_id_; }

private:
    int in_, out_;
    int w_id_, b_id_;
    Tensor x_;
};

// --- optimizer --------------------------------------------------------

struct AdamConfig {
    double lr = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    long t = 0;
};

// Single-tensor update; `t` is the already incremented step count (>= 1).
void adam_step(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, long t,
               const AdamConfig& cfg);

// Updates every trainable entry of the store from its accumulated gradient.
void adam_update(ParamStore& store, AdamState& state, const AdamConfig& cfg);

// --- network ----------------------------------------------------------

// Convolutional regression network: conv stages (conv -> batch norm -> ELU
// -> 2x2 max pool), flattened features concatenated with auxiliary scalars,
// then dense hidden layers (each with batch norm + ELU) and a single linear
// output node. `shared_kernels` makes stages 2..k reference one weight bank
// with per-layer biases; stage 1 keeps its own kernels since its input depth
// differs.
struct ConvNetConfig {
    int input_size = 64;
    int in_channels = 1;
    std::vector<int> conv_channels{16, 32, 32, 64, 64, 64};
    bool shared_kernels = false;
    std::vector<int> dense_widths{64, 32};
    int aux_features = 3;
    double elu_alpha = 1.0;
    double bn_eps = 1e-5;
    double bn_momentum = 0.9;

    void validate() const;
    int stages() const { return static_cast<int>(conv_channels.size()); }
    int final_spatial() const;
    int flatten_width() const;

    nlohmann::json to_json() const;
    static ConvNetConfig from_json(const nlohmann::json& j);

    // Fig.-1 style regressor: six conv stages, two dense hidden layers,
    // one output node, voxel dimensions as auxiliary inputs.
    static ConvNetConfig regressor(int input_size, bool shared_kernels);
    // Per-axis slice classifier: three conv stages on a downsampled slice.
    static ConvNetConfig locator(int input_size);
};

class ConvNet {
public:
    ConvNet(ConvNetConfig cfg, uint64_t init_seed);

    // x: (N, in_channels, S, S); aux: (N, aux_features). Returns (N).
    Tensor forward(const Tensor& x, const Tensor& aux, bool train);
    // gy: (N). Accumulates parameter gradients, returns dLoss/dx.
    Tensor backward(const Tensor& gy);

    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    const ConvNetConfig& config() const { return cfg_; }
    size_t trainable_parameter_count() const { return store_.trainable_parameter_count(); }

    // Gradient of the summed output w.r.t. the pooled output of `stage`
    // (0-based), for the saliency back-projection. Must follow a forward.
    Tensor backward_to_stage(int stage, const Tensor& gy);
    // Deconvnet-style projection of a stage gradient down to the input
    // plane: per stage, argmax unpooling, ReLU gating, then transposed
    // application of the learned kernels.
    Tensor project_to_input(int from_stage, Tensor g) const;

    // Freeze or release the pooling switches of every stage (see
    // MaxPool2x2::set_frozen).
    void set_pool_switches_frozen(bool frozen);

    void save_checkpoint(const std::string& path, const nlohmann::json& meta) const;
    static ConvNet load_checkpoint(const std::string& path, nlohmann::json* meta_out = nullptr);

    // In-memory form of the checkpoint file content.
    std::string checkpoint_blob(const nlohmann::json& meta) const;
    static ConvNet load_checkpoint_blob(const std::string& bytes,
                                        nlohmann::json* meta_out = nullptr);

    // Raw little-endian serialization of all entries, for byte-level tests.
    std::vector<unsigned char> serialize_params() const;

private:
    void build(uint64_t init_seed);

    ConvNetConfig cfg_;
    ParamStore store_;
    std::vector<Conv3x3> convs_;
    std::vector<BatchNorm> conv_bns_;
    std::vector<Elu> conv_elus_;
    std::vector<MaxPool2x2> pools_;
    std::vector<Dense> denses_;  // hidden denses + final output layer
    std::vector<BatchNorm> dense_bns_;
    std::vector<Elu> dense_elus_;
    int aux_width_ = 0;
    int batch_ = 0;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    int checked = 0;
};

// Central-difference check (h default 1e-5) of d(0.5*mean squared error)/dp
// against the analytic gradient on a random subset of trainable parameters.
// Relative error uses |a - n| / max(|a|, |n|, 1e-8).
GradCheckResult finite_diff_check(ConvNet& net, const Tensor& x, const Tensor& aux,
                                  const std::vector<double>& targets, int params_to_check,
                                  uint64_t seed, double h = 1e-5);

// Mean absolute error loss over a batch: returns loss and writes dLoss/dpred.
double l1_loss(const Tensor& pred, const std::vector<double>& targets, Tensor* dpred);

}  // namespace cacs
