#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "attreval/data.hpp"
#include "attreval/explain.hpp"

namespace attreval {

// one evaluation unit: a composite image plus the grid cell whose class is
// being explained. Composites are shared between the samples that evaluate
// different target cells of the same grid.
struct GridSample {
    std::shared_ptr<Tensor> composite; // C x (n*h) x (n*w)
    std::vector<int> cell_labels;      // n^2, row-major
    std::vector<int> cell_image_ids;   // n^2, ids from the source pool
    Setting setting = Setting::GridPG;
    int n = 2;
    int target_cell = 0;
    int id = 0; // grid id, shared across the targets of one composite

    GridGeometry geometry() const {
        return {n, composite->dim(1) / n, composite->dim(2) / n};
    }
};

// GridPG: n^2 distinct classes, evaluated at every cell. DiFull/DiPart: the
// top-left and bottom-right corners share a class (different images) and only
// those two cells are evaluated. No image repeats within one grid.
std::vector<GridSample> build_grids(const std::vector<LabeledImage>& pool, int n, int count,
                                    Setting setting, uint64_t seed);

struct SettingOutputs {
    int n = 0;
    int num_classes = 0;
    std::vector<float> logits; // n^2 x classes, row-major by cell
    float at(int cell, int cls) const {
        return logits[static_cast<size_t>(cell) * num_classes + cls];
    }
};

SettingOutputs eval_gridpg(const Model& model, const GridSample& grid);
SettingOutputs eval_difull(const Model& model, const GridSample& grid);
SettingOutputs eval_dipart(const Model& model, const GridSample& grid);

struct LocalizationRecord {
    int sample_id = 0;
    std::string method;
    std::string tap;
    int tap_index = 0;
    Setting setting = Setting::GridPG;
    int target_cell = 0;
    double score = 0.0;     // L in [0,1]
    double numerator = 0.0; // positive mass inside the target cell
};

// Eq-style positive-mass localization: score = sum of positive attribution in
// the target cell over the total positive attribution, 0 when the total is 0.
// The map may be at composite resolution or any resolution whose dims divide
// evenly into the n x n cell partition.
LocalizationRecord localization_score(const Tensor& map, const GridSample& grid, int target_cell);

void write_records_csv(const std::vector<LocalizationRecord>& records, const std::string& path);
void write_records_jsonl(const std::vector<LocalizationRecord>& records, const std::string& path);
std::vector<LocalizationRecord> read_records_csv(const std::string& path);

} // namespace attreval
