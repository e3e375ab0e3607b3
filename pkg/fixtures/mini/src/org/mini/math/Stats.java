package org.mini.math;

import java.util.Arrays;

public final class Stats {

    private Stats() {
    }

    public static double mean(double[] xs) {
        double sum = 0;
        for (double x : xs) {
            sum += x;
        }
        return sum / xs.length;
    }

    public static double variance(double[] xs) {
        double m = mean(xs);
        double acc = 0;
        for (double x : xs) {
            acc += (x - m) * (x - m);
        }
        return acc / xs.length;
    }

    public static double median(double[] xs) {
        double[] copy = Arrays.copyOf(xs, xs.length);
        Arrays.sort(copy);
        int mid = copy.length / 2;
        return copy[mid];
    }

    public static int max(int[] xs) {
        int best = Integer.MIN_VALUE;
        for (int x : xs) {
            best = Math.max(best, x);
        }
        return best;
    }

    public static double max(double[] xs) {
        double best = Double.NEGATIVE_INFINITY;
        for (double x : xs) {
            best = Math.max(best, x);
        }
        return best;
    }
}
