#pragma once

#include <filesystem>
#include <iomanip>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "setpose/data_io.hpp"
#include "setpose/metrics.hpp"

namespace setpose::report {

namespace fs = std::filesystem;
using nlohmann::json;

/// Loads every obj_NNNNNN.ply (millimeters) in `dir` as meters.
inline std::map<int, PointCloud> load_models_dir(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IOError("not a directory: " + dir.string());
    static const std::regex name(R"(obj_(\d+)\.ply)");
    std::map<int, PointCloud> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        std::smatch m;
        const std::string f = e.path().filename().string();
        if (e.is_regular_file() && std::regex_match(f, m, name)) out[std::stoi(m[1])] = io::load_ply(e.path(), true);
    }
    return out;
}

/// Diameters from models_info.json when present, else from the clouds.
inline std::map<int, double> model_diameters(const fs::path& dir, const std::map<int, PointCloud>& models) {
    const fs::path info = dir / "models_info.json";
    if (fs::exists(info)) return io::load_model_diameters(info);
    std::map<int, double> out;
    for (const auto& [id, pc] : models) out[id] = model_diameter(pc);
    return out;
}

inline std::string num(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

inline std::string metrics_csv(const MetricReport& rep) {
    std::ostringstream os;
    os << "obj_id,count,auc_add,auc_adds,auc_add_s,ar_add_s_0.1m,ar_add_s_0.1d\n";
    auto row = [&](const std::string& id, const ClassMetrics& c) {
        os << id << ',' << c.count << ',' << num(c.auc_add) << ',' << num(c.auc_adds) << ',' << num(c.auc_add_s) << ','
           << num(c.ar_add_s_01m) << ',' << num(c.ar_add_s_01d) << '\n';
    };
    for (const auto& c : rep.classes) row(std::to_string(c.obj_id), c);
    row("MEAN", rep.mean);
    return os.str();
}

inline json metrics_json(const MetricReport& rep) {
    auto one = [](const ClassMetrics& c) {
        return json{{"count", c.count},           {"auc_add", c.auc_add},
                    {"auc_adds", c.auc_adds},     {"auc_add_s", c.auc_add_s},
                    {"ar_add_s_0.1m", c.ar_add_s_01m}, {"ar_add_s_0.1d", c.ar_add_s_01d}};
    };
    json classes = json::array();
    for (const auto& c : rep.classes) {
        auto j = one(c);
        j["obj_id"] = c.obj_id;
        classes.push_back(j);
    }
    return {{"classes", classes}, {"mean", one(rep.mean)}};
}

/// Bar chart of per-class AUC of ADD(-S), mean bar last.
inline std::string metrics_svg(const MetricReport& rep) {
    const int bar = 36, gap = 12, left = 50, top = 30, height = 220;
    const int n = int(rep.classes.size()) + 1;
    const int width = left + n * (bar + gap) + gap;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << top + height + 50
       << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    os << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">AUC of ADD(-S) per object</text>\n";
    for (int k = 0; k <= 4; ++k) {
        const double y = top + height * (1.0 - k / 4.0);
        os << "<line x1=\"" << left << "\" y1=\"" << y << "\" x2=\"" << width - gap << "\" y2=\"" << y
           << "\" stroke=\"#ddd\"/>\n<text x=\"" << left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">"
           << num(k / 4.0) << "</text>\n";
    }
    auto draw = [&](int i, const std::string& label, double v, const char* color) {
        const double h = height * std::clamp(v, 0.0, 1.0);
        const int x = left + gap + i * (bar + gap);
        os << "<rect x=\"" << x << "\" y=\"" << top + height - h << "\" width=\"" << bar << "\" height=\"" << h
           << "\" fill=\"" << color << "\"><title>" << label << ": " << num(v) << "</title></rect>\n";
        os << "<text x=\"" << x + bar / 2 << "\" y=\"" << top + height + 16 << "\" text-anchor=\"middle\">" << label
           << "</text>\n";
    };
    for (std::size_t i = 0; i < rep.classes.size(); ++i)
        draw(int(i), std::to_string(rep.classes[i].obj_id), rep.classes[i].auc_add_s, "#4a7ab5");
    draw(n - 1, "MEAN", rep.mean.auc_add_s, "#c0504d");
    os << "</svg>\n";
    return os.str();
}

struct EvalInputs {
    fs::path results;
    fs::path gt;      // BOP split root or a single scene directory
    fs::path models;  // directory of obj_NNNNNN.ply (+ models_info.json)
    std::set<int> symmetric;
};

inline MetricReport run_eval(const EvalInputs& in) {
    const auto est = io::read_results(in.results);
    std::vector<io::SceneAnnotation> scenes;
    if (fs::exists(in.gt / "scene_gt.json"))
        scenes.push_back(io::load_bop_scene(in.gt));
    else
        scenes = io::load_bop_split(in.gt);
    const auto gt = io::gt_instances(scenes);
    const auto models = load_models_dir(in.models);
    const auto diameters = model_diameters(in.models, models);
    const auto recs = join_estimates(gt, est, diameters);
    return evaluate(recs, models, in.symmetric);
}

inline void write_report(const fs::path& out_dir, const MetricReport& rep) {
    fs::create_directories(out_dir);
    io::write_file_atomic(out_dir / "metrics.csv", metrics_csv(rep));
    io::write_file_atomic(out_dir / "metrics.json", metrics_json(rep).dump(2) + "\n");
    io::write_file_atomic(out_dir / "auc_per_class.svg", metrics_svg(rep));
}

}  // namespace setpose::report
