package org.mini.math;

/** Immutable rational number. */
public final class Fraction implements Comparable<Fraction> {

    private final long num;
    private final long den;

    public Fraction(long num, long den) {
        if (den == 0) {
            throw new ArithmeticException("zero denominator");
        }
        this.num = num;
        this.den = den;
    }

    static long gcd(long a, long b) {
        while (b != 0) {
            long t = a % b;
            a = b;
            b = t;
        }
        return Math.abs(a);
    }

    public Fraction add(Fraction o) {
        return new Fraction(num * o.den + o.num * den, den + o.den).reduce();
    }

    public Fraction multiply(Fraction o) {
        return new Fraction(num * o.num, den * o.den).reduce();
    }

    public Fraction reduce() {
        long g = gcd(num, den);
        return new Fraction(num / g, den / g);
    }

    @Override
    public int compareTo(Fraction o) {
        return Long.compare(num * o.den, o.num * den);
    }

    @Override
    public String toString() {
        return den == 1 ? Long.toString(num) : num + "/" + den;
    }
}
