#pragma once
// Minimal SVG output for distribution-overlap figures: two histograms on a
// shared axis with a d' annotation. File output only.

#include <filesystem>

#include "lisard/common.hpp"

namespace lisard {

inline void write_histogram_svg(const std::filesystem::path& file, const std::vector<double>& a,
                                const std::vector<double>& b, const std::string& label_a,
                                const std::string& label_b, const std::string& title,
                                double dprime, int bins = 48) {
    require(!a.empty() && !b.empty(), "write_histogram_svg: empty samples");
    double lo = a[0], hi = a[0];
    for (double v : a) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    for (double v : b) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi - lo < 1e-12) {
        lo -= 0.5;
        hi += 0.5;
    }
    std::vector<double> ha(static_cast<std::size_t>(bins), 0.0);
    std::vector<double> hb(static_cast<std::size_t>(bins), 0.0);
    auto fill = [&](const std::vector<double>& v, std::vector<double>& h) {
        for (double x : v) {
            int bin = static_cast<int>((x - lo) / (hi - lo) * bins);
            bin = std::clamp(bin, 0, bins - 1);
            h[static_cast<std::size_t>(bin)] += 1.0 / static_cast<double>(v.size());
        }
    };
    fill(a, ha);
    fill(b, hb);
    double peak = 1e-12;
    for (int i = 0; i < bins; ++i) peak = std::max({peak, ha[static_cast<std::size_t>(i)],
                                                    hb[static_cast<std::size_t>(i)]});

    const double width = 640, height = 400, mx = 54, my = 44;
    const double plot_w = width - 2 * mx, plot_h = height - 2 * my;
    const double bar_w = plot_w / bins;

    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream os(file, std::ios::trunc);
    if (!os) throw IoError("cannot write figure: " + file.string());
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
       << height << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\""
       << " font-size=\"15\">" << title << "</text>\n";
    auto bars = [&](const std::vector<double>& h, const char* color) {
        for (int i = 0; i < bins; ++i) {
            double v = h[static_cast<std::size_t>(i)] / peak;
            if (v <= 0.0) continue;
            double bh = v * plot_h;
            os << "<rect x=\"" << mx + i * bar_w << "\" y=\"" << my + plot_h - bh << "\" width=\""
               << bar_w << "\" height=\"" << bh << "\" fill=\"" << color
               << "\" fill-opacity=\"0.55\"/>\n";
        }
    };
    bars(ha, "#4477cc");
    bars(hb, "#cc4444");
    os << "<line x1=\"" << mx << "\" y1=\"" << my + plot_h << "\" x2=\"" << mx + plot_w
       << "\" y2=\"" << my + plot_h << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << mx << "\" y=\"" << height - 12
       << "\" font-family=\"sans-serif\" font-size=\"12\">" << fmt_g(lo, 4) << "</text>\n";
    os << "<text x=\"" << mx + plot_w << "\" y=\"" << height - 12
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">" << fmt_g(hi, 4)
       << "</text>\n";
    os << "<rect x=\"" << mx + 8 << "\" y=\"" << my + 6
       << "\" width=\"12\" height=\"12\" fill=\"#4477cc\" fill-opacity=\"0.55\"/>\n";
    os << "<text x=\"" << mx + 24 << "\" y=\"" << my + 16
       << "\" font-family=\"sans-serif\" font-size=\"12\">" << label_a << "</text>\n";
    os << "<rect x=\"" << mx + 8 << "\" y=\"" << my + 24
       << "\" width=\"12\" height=\"12\" fill=\"#cc4444\" fill-opacity=\"0.55\"/>\n";
    os << "<text x=\"" << mx + 24 << "\" y=\"" << my + 34
       << "\" font-family=\"sans-serif\" font-size=\"12\">" << label_b << "</text>\n";
    os << "<text x=\"" << mx + plot_w - 8 << "\" y=\"" << my + 16
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"13\">d' = "
       << fmt_g(dprime, 4) << "</text>\n";
    os << "</svg>\n";
}

}  // namespace lisard
