#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "setpose/data_io.hpp"

namespace setpose::io {

/// One detected object's 2D keypoints in pixels.
struct KeypointDetection {
    int scene_id = 0;
    int im_id = 0;
    int obj_id = 0;
    double score = 1.0;
    std::vector<Vec2> pixels;
};

/// CSV: scene_id,im_id,obj_id,score,keypoints with the keypoints field as
/// space-separated "x0 y0 x1 y1 ..." pixel coordinates.
inline std::string format_keypoints(const std::vector<KeypointDetection>& dets) {
    std::ostringstream os;
    os << "scene_id,im_id,obj_id,score,keypoints\n";
    for (const auto& d : dets) {
        os << d.scene_id << ',' << d.im_id << ',' << d.obj_id << ',' << detail::fmt_num(d.score) << ',';
        for (std::size_t k = 0; k < d.pixels.size(); ++k)
            os << (k ? " " : "") << detail::fmt_num(d.pixels[k].x()) << ' ' << detail::fmt_num(d.pixels[k].y());
        os << '\n';
    }
    return os.str();
}

inline std::vector<KeypointDetection> parse_keypoints(const std::string& text, const std::string& name = "<keypoints>") {
    std::istringstream in(text);
    std::string line;
    std::vector<KeypointDetection> out;
    int lineno = 0;
    auto fail = [&](const std::string& why) { throw ParseError(name + ":" + std::to_string(lineno) + ": " + why); };
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (lineno == 1) {
            if (line != "scene_id,im_id,obj_id,score,keypoints") fail("unexpected header");
            continue;
        }
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() != 5) fail("expected 5 fields, got " + std::to_string(f.size()));
        KeypointDetection d;
        try {
            d.scene_id = std::stoi(f[0]);
            d.im_id = std::stoi(f[1]);
            d.obj_id = std::stoi(f[2]);
            d.score = std::stod(f[3]);
        } catch (const std::exception&) {
            fail("bad number");
        }
        std::istringstream ks(f[4]);
        std::vector<double> v;
        std::string tok;
        while (ks >> tok) {
            try {
                std::size_t used = 0;
                v.push_back(std::stod(tok, &used));
                if (used != tok.size()) fail("bad keypoint coordinate '" + tok + "'");
            } catch (const std::invalid_argument&) {
                fail("bad keypoint coordinate '" + tok + "'");
            } catch (const std::out_of_range&) {
                fail("keypoint coordinate out of range");
            }
        }
        if (v.empty() || v.size() % 2 != 0) fail("keypoints need an even, non-zero number of values");
        for (std::size_t k = 0; k < v.size(); k += 2) d.pixels.emplace_back(v[k], v[k + 1]);
        out.push_back(std::move(d));
    }
    if (lineno == 0) fail("empty file");
    return out;
}

inline std::vector<KeypointDetection> read_keypoints(const fs::path& path) {
    return parse_keypoints(read_file(path), path.string());
}

}  // namespace setpose::io
