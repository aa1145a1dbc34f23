#pragma once
// Tiny SVG plot writer for report rendering: lines with error bands, scatter
// points, and step histograms. No external plotting dependency.

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "phasegen/common.hpp"
#include "phasegen/io.hpp"

namespace phasegen {

class SvgPlot {
public:
    SvgPlot(std::string title, std::string xlabel, std::string ylabel, int width = 640,
            int height = 420)
        : title_(std::move(title)),
          xlabel_(std::move(xlabel)),
          ylabel_(std::move(ylabel)),
          w_(width),
          h_(height) {}

    void add_line(const std::vector<std::array<double, 2>>& pts, const std::string& color,
                  const std::string& label = "") {
        series_.push_back({Kind::line, pts, {}, color, label});
        touch(pts);
    }

    void add_points(const std::vector<std::array<double, 2>>& pts, const std::string& color,
                    const std::string& label = "") {
        series_.push_back({Kind::points, pts, {}, color, label});
        touch(pts);
    }

    /// Vertical band between (x, lo) and (x, hi) per point.
    void add_band(const std::vector<std::array<double, 3>>& pts, const std::string& color) {
        Series s;
        s.kind = Kind::band;
        s.band = pts;
        s.color = color;
        for (const auto& p : pts) {
            touch_point(p[0], p[1]);
            touch_point(p[0], p[2]);
        }
        series_.push_back(std::move(s));
    }

    /// Histogram outline from bin edges (n+1) and heights (n).
    void add_steps(const std::vector<double>& edges, const std::vector<double>& heights,
                   const std::string& color, const std::string& label = "") {
        require(edges.size() == heights.size() + 1, "edges/heights size mismatch");
        std::vector<std::array<double, 2>> pts;
        pts.push_back({edges.front(), 0.0});
        for (size_t i = 0; i < heights.size(); ++i) {
            pts.push_back({edges[i], heights[i]});
            pts.push_back({edges[i + 1], heights[i]});
        }
        pts.push_back({edges.back(), 0.0});
        add_line(pts, color, label);
    }

    /// Reference diagonal y = x across the current data range.
    void add_identity(const std::string& color = "#999999") {
        double lo = std::max(xmin_, ymin_), hi = std::min(xmax_, ymax_);
        if (lo < hi) add_line({{lo, lo}, {hi, hi}}, color);
    }

    void write(const fs::path& path) const {
        std::ostringstream out;
        const double ml = 64, mr = 16, mt = 36, mb = 48;  // margins
        const double pw = w_ - ml - mr, ph = h_ - mt - mb;
        double xmin = xmin_, xmax = xmax_, ymin = ymin_, ymax = ymax_;
        if (!(xmax > xmin)) xmax = xmin + 1;
        if (!(ymax > ymin)) ymax = ymin + 1;
        // pad the y range slightly so flat lines stay visible
        const double ypad = 0.05 * (ymax - ymin);
        ymin -= ypad;
        ymax += ypad;
        auto sx = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
        auto sy = [&](double y) { return mt + ph - (y - ymin) / (ymax - ymin) * ph; };

        out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w_ << "' height='" << h_
            << "' viewBox='0 0 " << w_ << " " << h_ << "'>\n";
        out << "<rect width='100%' height='100%' fill='white'/>\n";
        out << "<text x='" << w_ / 2 << "' y='20' text-anchor='middle' font-size='14' "
               "font-family='sans-serif'>"
            << escape(title_) << "</text>\n";

        // axes + ticks
        out << "<rect x='" << ml << "' y='" << mt << "' width='" << pw << "' height='" << ph
            << "' fill='none' stroke='#333'/>\n";
        for (int i = 0; i <= 5; ++i) {
            double fx = xmin + (xmax - xmin) * i / 5.0;
            double fy = ymin + (ymax - ymin) * i / 5.0;
            out << "<line x1='" << sx(fx) << "' y1='" << mt + ph << "' x2='" << sx(fx)
                << "' y2='" << mt + ph + 4 << "' stroke='#333'/>\n";
            out << "<text x='" << sx(fx) << "' y='" << mt + ph + 18
                << "' text-anchor='middle' font-size='10' font-family='sans-serif'>"
                << fmt(fx) << "</text>\n";
            out << "<line x1='" << ml - 4 << "' y1='" << sy(fy) << "' x2='" << ml << "' y2='"
                << sy(fy) << "' stroke='#333'/>\n";
            out << "<text x='" << ml - 6 << "' y='" << sy(fy) + 3
                << "' text-anchor='end' font-size='10' font-family='sans-serif'>" << fmt(fy)
                << "</text>\n";
        }
        out << "<text x='" << ml + pw / 2 << "' y='" << h_ - 10
            << "' text-anchor='middle' font-size='12' font-family='sans-serif'>"
            << escape(xlabel_) << "</text>\n";
        out << "<text x='14' y='" << mt + ph / 2
            << "' text-anchor='middle' font-size='12' font-family='sans-serif' "
               "transform='rotate(-90 14 "
            << mt + ph / 2 << ")'>" << escape(ylabel_) << "</text>\n";

        for (const auto& s : series_) {
            if (s.kind == Kind::band) {
                out << "<polygon points='";
                for (const auto& p : s.band) out << sx(p[0]) << "," << sy(p[1]) << " ";
                for (auto it = s.band.rbegin(); it != s.band.rend(); ++it)
                    out << sx((*it)[0]) << "," << sy((*it)[2]) << " ";
                out << "' fill='" << s.color << "' fill-opacity='0.25' stroke='none'/>\n";
            } else if (s.kind == Kind::line) {
                out << "<polyline fill='none' stroke='" << s.color << "' stroke-width='1.5' points='";
                for (const auto& p : s.pts) out << sx(p[0]) << "," << sy(p[1]) << " ";
                out << "'/>\n";
            } else {
                for (const auto& p : s.pts)
                    out << "<circle cx='" << sx(p[0]) << "' cy='" << sy(p[1])
                        << "' r='2.5' fill='" << s.color << "' fill-opacity='0.7'/>\n";
            }
        }

        // legend
        double ly = mt + 12;
        for (const auto& s : series_) {
            if (s.label.empty()) continue;
            out << "<rect x='" << ml + pw - 130 << "' y='" << ly - 8
                << "' width='10' height='10' fill='" << s.color << "'/>\n";
            out << "<text x='" << ml + pw - 116 << "' y='" << ly
                << "' font-size='10' font-family='sans-serif'>" << escape(s.label)
                << "</text>\n";
            ly += 16;
        }
        out << "</svg>\n";
        write_text_file(path, out.str());
    }

private:
    enum class Kind { line, points, band };
    struct Series {
        Kind kind;
        std::vector<std::array<double, 2>> pts;
        std::vector<std::array<double, 3>> band;
        std::string color;
        std::string label;
    };

    static std::string fmt(double v) {
        std::ostringstream o;
        if (std::abs(v) >= 1000 || (std::abs(v) < 0.01 && v != 0))
            o.precision(2), o << std::scientific << v;
        else
            o.precision(3), o << v;
        return o.str();
    }

    static std::string escape(const std::string& s) {
        std::string out;
        for (char c : s) {
            if (c == '<') out += "&lt;";
            else if (c == '>') out += "&gt;";
            else if (c == '&') out += "&amp;";
            else out += c;
        }
        return out;
    }

    void touch_point(double x, double y) {
        xmin_ = std::min(xmin_, x);
        xmax_ = std::max(xmax_, x);
        ymin_ = std::min(ymin_, y);
        ymax_ = std::max(ymax_, y);
    }
    void touch(const std::vector<std::array<double, 2>>& pts) {
        for (const auto& p : pts) touch_point(p[0], p[1]);
    }

    std::string title_, xlabel_, ylabel_;
    int w_, h_;
    std::vector<Series> series_;
    double xmin_ = std::numeric_limits<double>::infinity();
    double xmax_ = -std::numeric_limits<double>::infinity();
    double ymin_ = std::numeric_limits<double>::infinity();
    double ymax_ = -std::numeric_limits<double>::infinity();
};

}  // namespace phasegen
