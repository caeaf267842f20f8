#include "attreval/grids.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "attreval/rng.hpp"

namespace attreval {

namespace {

std::shared_ptr<Tensor> assemble_composite(const std::vector<const LabeledImage*>& cells, int n) {
    const Tensor& first = cells[0]->pixels;
    const int ch = first.dim(0), h = first.dim(1), w = first.dim(2);
    auto comp = std::make_shared<Tensor>(std::vector<int>{ch, n * h, n * w});
    for (int cell = 0; cell < n * n; ++cell) {
        const int row = cell / n, col = cell % n;
        const Tensor& px = cells[static_cast<size_t>(cell)]->pixels;
        for (int c = 0; c < ch; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    comp->at3(c, row * h + y, col * w + x) = px.at3(c, y, x);
    }
    return comp;
}

} // namespace

std::vector<GridSample> build_grids(const std::vector<LabeledImage>& pool, int n, int count,
                                    Setting setting, uint64_t seed) {
    if (n < 1) throw std::runtime_error("build_grids: n must be >= 1");
    if (count < 1) throw std::runtime_error("build_grids: count must be >= 1");
    const int cells = n * n;

    // group pool indices by class
    int num_classes = 0;
    for (const auto& img : pool) num_classes = std::max(num_classes, img.label + 1);
    std::vector<std::vector<int>> by_class(static_cast<size_t>(num_classes));
    for (size_t i = 0; i < pool.size(); ++i)
        by_class[static_cast<size_t>(pool[i].label)].push_back(static_cast<int>(i));

    std::vector<int> usable_classes;
    std::vector<int> repeat_classes; // classes with >= 2 images, usable as the repeated corner
    for (int c = 0; c < num_classes; ++c) {
        if (!by_class[static_cast<size_t>(c)].empty()) usable_classes.push_back(c);
        if (by_class[static_cast<size_t>(c)].size() >= 2) repeat_classes.push_back(c);
    }
    const bool repeated = setting != Setting::GridPG;
    if (!repeated && static_cast<int>(usable_classes.size()) < cells)
        throw std::runtime_error("build_grids: pool has " + std::to_string(usable_classes.size()) +
                                 " classes, need " + std::to_string(cells) + " distinct");
    if (repeated &&
        (repeat_classes.empty() || static_cast<int>(usable_classes.size()) < cells - 1))
        throw std::runtime_error("build_grids: pool cannot supply a repeated-class grid");

    std::vector<GridSample> out;
    for (int gi = 0; gi < count; ++gi) {
        Rng rng = Rng::derive(seed, 0x67726964ULL * 1000003ULL + static_cast<uint64_t>(gi));

        std::vector<const LabeledImage*> chosen(static_cast<size_t>(cells), nullptr);
        std::vector<int> labels(static_cast<size_t>(cells), -1);
        std::vector<int> ids(static_cast<size_t>(cells), -1);

        auto pick_image = [&](int cls, int exclude_id) {
            const auto& list = by_class[static_cast<size_t>(cls)];
            for (;;) {
                const int idx = list[static_cast<size_t>(rng.uniform_int(
                    static_cast<int>(list.size())))];
                if (pool[static_cast<size_t>(idx)].id != exclude_id) return idx;
            }
        };

        if (!repeated) {
            // sample n^2 distinct classes via partial Fisher-Yates
            std::vector<int> classes = usable_classes;
            for (int k = 0; k < cells; ++k) {
                const int j = k + rng.uniform_int(static_cast<int>(classes.size()) - k);
                std::swap(classes[static_cast<size_t>(k)], classes[static_cast<size_t>(j)]);
            }
            for (int cell = 0; cell < cells; ++cell) {
                const int idx = pick_image(classes[static_cast<size_t>(cell)], -1);
                chosen[static_cast<size_t>(cell)] = &pool[static_cast<size_t>(idx)];
                labels[static_cast<size_t>(cell)] = pool[static_cast<size_t>(idx)].label;
                ids[static_cast<size_t>(cell)] = pool[static_cast<size_t>(idx)].id;
            }
        } else {
            const int corner_cls =
                repeat_classes[static_cast<size_t>(rng.uniform_int(
                    static_cast<int>(repeat_classes.size())))];
            const int first_idx = pick_image(corner_cls, -1);
            const int second_idx = pick_image(corner_cls, pool[static_cast<size_t>(first_idx)].id);
            std::vector<int> others;
            for (int c : usable_classes)
                if (c != corner_cls) others.push_back(c);
            for (int k = 0; k < cells - 2; ++k) {
                const int j = k + rng.uniform_int(static_cast<int>(others.size()) - k);
                std::swap(others[static_cast<size_t>(k)], others[static_cast<size_t>(j)]);
            }
            for (int cell = 0; cell < cells; ++cell) {
                int idx;
                if (cell == 0)
                    idx = first_idx;
                else if (cell == cells - 1)
                    idx = second_idx;
                else
                    idx = pick_image(others[static_cast<size_t>(cell - 1)], -1);
                chosen[static_cast<size_t>(cell)] = &pool[static_cast<size_t>(idx)];
                labels[static_cast<size_t>(cell)] = pool[static_cast<size_t>(idx)].label;
                ids[static_cast<size_t>(cell)] = pool[static_cast<size_t>(idx)].id;
            }
        }

        auto comp = assemble_composite(chosen, n);
        std::vector<int> targets;
        if (setting == Setting::GridPG) {
            for (int c = 0; c < cells; ++c) targets.push_back(c);
        } else {
            targets = {0, cells - 1};
        }
        for (int t : targets) {
            GridSample s;
            s.composite = comp;
            s.cell_labels = labels;
            s.cell_image_ids = ids;
            s.setting = setting;
            s.n = n;
            s.target_cell = t;
            s.id = gi;
            out.push_back(std::move(s));
        }
    }
    return out;
}

namespace {

SettingOutputs eval_with(const Model& model, const GridSample& grid, Setting setting) {
    const auto fn = make_explain(model, setting, 0, grid.geometry());
    const auto logits = fn->logits(*grid.composite);
    SettingOutputs out;
    out.n = grid.n;
    out.num_classes = model.num_classes();
    if (setting == Setting::GridPG) {
        // pointwise head globally pooled gives one vector; every cell sees it
        out.logits.reserve(static_cast<size_t>(grid.n) * grid.n * logits.size());
        for (int cell = 0; cell < grid.n * grid.n; ++cell)
            out.logits.insert(out.logits.end(), logits.begin(), logits.end());
    } else {
        out.logits = logits;
    }
    return out;
}

} // namespace

SettingOutputs eval_gridpg(const Model& model, const GridSample& grid) {
    return eval_with(model, grid, Setting::GridPG);
}

SettingOutputs eval_difull(const Model& model, const GridSample& grid) {
    return eval_with(model, grid, Setting::DiFull);
}

SettingOutputs eval_dipart(const Model& model, const GridSample& grid) {
    return eval_with(model, grid, Setting::DiPart);
}

LocalizationRecord localization_score(const Tensor& map, const GridSample& grid, int target_cell) {
    if (map.ndim() != 2) throw std::runtime_error("localization_score: map must be 2-d");
    const int n = grid.n;
    if (map.dim(0) % n != 0 || map.dim(1) % n != 0)
        throw std::runtime_error("localization_score: map " + shape_str(map.shape) +
                                 " does not partition into " + std::to_string(n) + "x" +
                                 std::to_string(n) + " cells");
    if (target_cell < 0 || target_cell >= n * n)
        throw std::runtime_error("localization_score: target cell out of range");
    const int ch = map.dim(0) / n, cw = map.dim(1) / n;
    const int trow = target_cell / n, tcol = target_cell % n;

    double total = 0.0, inside = 0.0;
    for (int y = 0; y < map.dim(0); ++y)
        for (int x = 0; x < map.dim(1); ++x) {
            const float v = map.at2(y, x);
            if (v > 0.0f) {
                total += v;
                if (y / ch == trow && x / cw == tcol) inside += v;
            }
        }

    LocalizationRecord rec;
    rec.sample_id = grid.id;
    rec.setting = grid.setting;
    rec.target_cell = target_cell;
    rec.numerator = inside;
    rec.score = total > 0.0 ? inside / total : 0.0; // zero-denominator rule
    return rec;
}

void write_records_csv(const std::vector<LocalizationRecord>& records, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    std::fputs("sample_id,method,tap,setting,target_cell,score,numerator\n", f);
    for (const auto& r : records)
        std::fprintf(f, "%d,%s,%s,%s,%d,%.9g,%.9g\n", r.sample_id, r.method.c_str(), r.tap.c_str(),
                     setting_name(r.setting), r.target_cell, r.score, r.numerator);
    std::fclose(f);
}

void write_records_jsonl(const std::vector<LocalizationRecord>& records, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    for (const auto& r : records) {
        nlohmann::json j;
        j["sample_id"] = r.sample_id;
        j["method"] = r.method;
        j["tap"] = r.tap;
        j["setting"] = setting_name(r.setting);
        j["target_cell"] = r.target_cell;
        j["score"] = r.score;
        j["numerator"] = r.numerator;
        f << j.dump() << "\n";
    }
}

std::vector<LocalizationRecord> read_records_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(f, line) || line.rfind("sample_id,", 0) != 0)
        throw std::runtime_error("records csv '" + path + "': bad header");
    std::vector<LocalizationRecord> out;
    size_t lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cols;
        size_t pos = 0;
        while (true) {
            const size_t comma = line.find(',', pos);
            if (comma == std::string::npos) {
                cols.push_back(line.substr(pos));
                break;
            }
            cols.push_back(line.substr(pos, comma - pos));
            pos = comma + 1;
        }
        if (cols.size() != 7)
            throw std::runtime_error("records csv '" + path + "': line " + std::to_string(lineno) +
                                     " has " + std::to_string(cols.size()) + " columns");
        LocalizationRecord r;
        r.sample_id = std::stoi(cols[0]);
        r.method = cols[1];
        r.tap = cols[2];
        r.setting = setting_from_name(cols[3]);
        r.target_cell = std::stoi(cols[4]);
        r.score = std::stod(cols[5]);
        r.numerator = std::stod(cols[6]);
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace attreval
