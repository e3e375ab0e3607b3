package org.mini.time;

/** A signed span of seconds. */
public final class Duration {

    private final long seconds;

    private Duration(long seconds) {
        this.seconds = seconds;
    }

    public static Duration ofSeconds(long seconds) {
        return new Duration(seconds);
    }

    public Duration plus(Duration other) {
        return new Duration(Math.addExact(seconds, other.seconds));
    }

    public long toMinutes() {
        return Math.round(seconds / 60.0);
    }

    public boolean isNegative() {
        return seconds < 0;
    }

    public String format() {
        long abs = Math.abs(seconds);
        String body = String.format("%d:%02d", abs / 60, abs % 60);
        return isNegative() ? "-" + body : body;
    }
}
