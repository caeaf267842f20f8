#pragma once

#include <memory>
#include <vector>

#include "attreval/model.hpp"

namespace attreval {

enum class Setting { GridPG, DiFull, DiPart };

const char* setting_name(Setting s);
Setting setting_from_name(const std::string& name);

struct GridGeometry {
    int n = 2;      // grid is n x n cells
    int cell_h = 0; // cell size in composite pixels
    int cell_w = 0;
};

// head transform for the implementation-invariance demonstration: an extra
// linear stage between the per-cell pooled features and the classification
// layer. stage1[i] maps the concatenation of all cells' pooled features to
// cell i's head input (identity block plus a +/- aggregator pair over the
// disconnected cells); stage2 is the original classifier extended with two
// unit-weight columns.
struct ImplinvHead {
    std::vector<Linear> stage1; // per cell: (C+2) x (n^2 * C)
    Linear stage2;              // classes x (C+2)
    int channels = 0;
};

// the differentiable scalar-logit function every attribution method explains:
// f_explain of one evaluation setting, applied to a tap input
class ExplainFn {
  public:
    virtual ~ExplainFn() = default;
    virtual int num_logits() const = 0;
    virtual std::vector<float> logits(const Tensor& x) const = 0;
    virtual Tensor input_gradient(const Tensor& x, int target,
                                  ReluMode mode = ReluMode::Standard) const = 0;
    // forward of a single logit; settings with disconnected branches override
    // this to evaluate only the branch the target depends on
    virtual float logit(const Tensor& x, int target) const;
};

// plain sequential f_explain = layers[from, end); logits = class logits.
// With the [GlobalAvgPool, Linear] head this is exactly the GridPG pointwise
// head followed by global pooling (the mean commutes with the linear map).
class SequentialExplain : public ExplainFn {
  public:
    SequentialExplain(const Model& model, int from_layer);
    int num_logits() const override { return num_logits_; }
    std::vector<float> logits(const Tensor& x) const override;
    Tensor input_gradient(const Tensor& x, int target, ReluMode mode) const override;

  private:
    const Model& model_;
    int from_;
    int num_logits_;
};

// DiFull: each cell of the tap input passes separately through the remaining
// backbone and its own head; logits are n^2 x classes, flat index
// cell*classes+class. Gradients for cells other than the target's are exact
// zeros by construction (no path exists in the branch graph).
class DifullExplain : public ExplainFn {
  public:
    DifullExplain(const Model& model, int from_layer, const GridGeometry& geom,
                  const ImplinvHead* transformed = nullptr);
    int num_logits() const override { return num_logits_; }
    std::vector<float> logits(const Tensor& x) const override;
    float logit(const Tensor& x, int target) const override;
    Tensor input_gradient(const Tensor& x, int target, ReluMode mode) const override;

    Tensor cell_slice(const Tensor& x, int cell) const;
    void add_cell_block(Tensor& dst, const Tensor& cell_tensor, int cell) const;
    int cells() const { return geom_.n * geom_.n; }
    int classes() const { return classes_; }
    int backbone_end() const { return backbone_end_; }
    int from_layer() const { return from_; }
    const Model& model() const { return model_; }
    const ImplinvHead* transformed() const { return transformed_; }

    // pooled features of every cell, concatenated row-major (n^2 * C)
    std::vector<float> pooled_features(const Tensor& x) const;

  private:
    Tensor branch_features(const Tensor& x, int cell) const; // pre-head features
    const Model& model_;
    int from_;
    int backbone_end_; // == model.head_start
    GridGeometry geom_;
    const ImplinvHead* transformed_;
    std::vector<int> in_shape_;
    std::vector<int> cell_in_shape_;
    int classes_;
    int num_logits_;
};

// DiPart: shared backbone over the composite, then per-cell local pooling of
// the pointwise head. Cell i pools exactly the feature positions whose
// receptive-field centre lies over cell i.
class DipartExplain : public ExplainFn {
  public:
    DipartExplain(const Model& model, int from_layer, const GridGeometry& geom);
    int num_logits() const override { return num_logits_; }
    std::vector<float> logits(const Tensor& x) const override;
    Tensor input_gradient(const Tensor& x, int target, ReluMode mode) const override;

    // cell index of every final-feature row/column
    const std::vector<int>& row_cells() const { return row_cell_; }
    const std::vector<int>& col_cells() const { return col_cell_; }

  private:
    const Model& model_;
    int from_;
    GridGeometry geom_;
    int classes_;
    int num_logits_;
    std::vector<int> row_cell_, col_cell_;
    std::vector<int> region_count_; // feature positions per cell
};

// requires head == [GlobalAvgPool, Linear]; throws otherwise
void validate_grid_head(const Model& model);

// receptive-field centre of feature index i along one axis, in half pixels:
// centre_half(i) = 2*alpha*i + beta_half, composed analytically over the
// backbone layer geometry
struct RfAffine {
    long long alpha = 1;
    long long beta_half = 0;
};
RfAffine rf_centre_map(const Model& model, int backbone_end);

// cell index for a centre in half-pixel units; centres exactly on a border
// belong to the earlier cell
int cell_of_centre(long long centre_half, int cell_px, int n);

std::unique_ptr<ExplainFn> make_explain(const Model& model, Setting setting, int from_layer,
                                        const GridGeometry& geom,
                                        const ImplinvHead* transformed = nullptr);

} // namespace attreval
